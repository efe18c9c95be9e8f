"""CapsProm: embedding -> convolution -> primary capsules -> class capsules
with routing-by-agreement -> dense sigmoid head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .encoding import EmbeddingTable, batch_indices, embed
from .tensor import Tensor

SQUASH_EPS = 1e-9


class SequenceLengthError(ValueError):
    """Input length is incompatible with the model geometry."""


@dataclass
class CapsPromConfig:
    seq_len: int = 81
    embedding_dim: int = 9
    conv_filters: int = 256
    conv_kernel: int = 9
    pc_channels: int = 32
    pc_capsule_dim: int = 8
    pc_kernel: int = 9
    pc_stride: int = 2
    digit_dim: int = 16
    n_classes: int = 2
    routing_iters: int = 3
    head_hidden: int = 128  # 0 drops the hidden layer

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValueError(f"{f.name}: expected an integer, got {v!r}")
            if v < (0 if f.name == "head_hidden" else 1):
                raise ValueError(f"{f.name}: must be positive, got {v}")
        if self.n_classes != 2:
            raise ValueError("n_classes: only binary class capsules are supported")
        self.conv_length  # raises on too-short inputs
        self.pc_length

    @property
    def conv_length(self) -> int:
        if self.seq_len < self.conv_kernel:
            raise SequenceLengthError(
                f"sequence length {self.seq_len} is shorter than the convolution kernel {self.conv_kernel}"
            )
        return self.seq_len - self.conv_kernel + 1

    @property
    def pc_length(self) -> int:
        L1 = self.conv_length
        if L1 < self.pc_kernel:
            raise SequenceLengthError(
                f"feature length {L1} is shorter than the primary-capsule kernel {self.pc_kernel}"
            )
        return (L1 - self.pc_kernel) // self.pc_stride + 1

    @property
    def pc_filters(self) -> int:
        return self.pc_channels * self.pc_capsule_dim

    @property
    def n_primary(self) -> int:
        return self.pc_length * self.pc_channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    head_weight: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError("margins must satisfy 0 < m_minus < m_plus < 1")
        if self.lambda_down <= 0:
            raise ValueError("lambda_down must be positive")
        if self.head_weight < 0:
            raise ValueError("head_weight must be non-negative")


def squash(s: Tensor, eps: float = SQUASH_EPS) -> Tensor:
    """Scale each capsule (last axis) to length |s|^2 / (1 + |s|^2), keeping its direction."""
    sq = T.reduce_sum(T.square(s), axis=-1, keepdims=True)
    scale = sq / ((sq + 1.0) * T.sqrt(sq + eps))
    return s * scale


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def primary_caps(features: Tensor, params: dict, config: CapsPromConfig) -> Tensor:
    """``(N, L1, F)`` conv features -> ``(N, L2 * channels, capsule_dim)`` squashed capsules."""
    if features.shape[-2] < config.pc_kernel:
        raise SequenceLengthError(
            f"feature length {features.shape[-2]} is shorter than the primary-capsule kernel {config.pc_kernel}"
        )
    h = T.relu(T.conv1d(features, params["pc_conv.kernels"], params["pc_conv.bias"], stride=config.pc_stride))
    lead = h.shape[:-2]
    caps = T.reshape(h, (*lead, h.shape[-2] * config.pc_channels, config.pc_capsule_dim))
    return squash(caps)


def route(u: Tensor, W: Tensor, iterations: int = 3, trace: list | None = None) -> Tensor:
    """Dynamic routing from input capsules ``u`` ``(N, n_in, d_in)`` to class capsules.

    ``W`` is ``(n_in, n_out, d_out, d_in)``. Returns ``(N, n_out, d_out)``.
    Logits start at zero for every call. When ``trace`` is a list, the
    coupling coefficients of each iteration are appended to it.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    unbatched = u.ndim == 2
    if unbatched:
        u = T.reshape(u, (1, *u.shape))
    n, n_in, d_in = u.shape
    _, n_out, d_out, _ = W.shape
    # predictions u_hat[n, j, i, :] = W[i, j] @ u[n, i], as one batched matmul over i
    w_t = T.transpose(T.reshape(W, (n_in, n_out * d_out, d_in)), (0, 2, 1))
    u_hat = T.matmul(T.transpose(u, (1, 0, 2)), w_t)
    u_hat = T.transpose(T.reshape(u_hat, (n_in, n, n_out, d_out)), (1, 2, 0, 3))
    logits = Tensor(np.zeros((n, n_out, n_in), dtype=u_hat.dtype))
    for it in range(iterations):
        c = T.softmax(logits, axis=1)
        if trace is not None:
            trace.append(c.data.transpose(0, 2, 1).copy())
        s = T.matmul(T.reshape(c, (n, n_out, 1, n_in)), u_hat)
        v = squash(T.reshape(s, (n, n_out, d_out)))
        if it + 1 < iterations:
            agree = T.matmul(u_hat, T.reshape(v, (n, n_out, d_out, 1)))
            logits = logits + T.reshape(agree, (n, n_out, n_in))
    if unbatched:
        v = T.reshape(v, v.shape[1:])
    return v


def capsule_lengths(caps: Tensor) -> Tensor:
    return T.l2_norm(caps, axis=-1)


def margin_loss(caps: Tensor, labels, cfg: MarginLossConfig, weights=None) -> Tensor:
    """Per-class squared hinge on capsule lengths, averaged over the batch."""
    labels = np.asarray(labels).reshape(-1)
    lengths = capsule_lengths(caps)
    lengths = T.reshape(lengths, (labels.size, -1))
    target = np.eye(lengths.shape[1], dtype=lengths.dtype)[labels.astype(np.intp)]
    present = T.square(T.relu(cfg.m_plus - lengths))
    absent = T.square(T.relu(lengths - cfg.m_minus))
    per_class = present * target + absent * ((1.0 - target) * cfg.lambda_down)
    per_sample = T.reduce_sum(per_class, axis=1)
    return _weighted_mean(per_sample, weights)


def binary_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """BCE of sigmoid(logits) against 0/1 labels, computed from logits."""
    logits = T.reshape(logits, (-1,))
    y = np.asarray(labels, dtype=logits.dtype).reshape(-1)
    per_sample = T.softplus(logits) - logits * y
    return _weighted_mean(per_sample, weights)


def _weighted_mean(per_sample: Tensor, weights) -> Tensor:
    if weights is None:
        return T.mean(per_sample)
    w = np.asarray(weights, dtype=per_sample.dtype).reshape(-1)
    return T.reduce_sum(per_sample * w) / float(w.sum())


def loss(caps: Tensor, logits: Tensor, labels, cfg: MarginLossConfig | None = None, weights=None) -> Tensor:
    """Margin loss plus ``head_weight`` times BCE on the sigmoid head."""
    cfg = cfg or MarginLossConfig()
    total = margin_loss(caps, labels, cfg, weights)
    if cfg.head_weight:
        total = total + binary_cross_entropy(logits, labels, weights) * cfg.head_weight
    return total


def predict(prob, threshold: float = 0.5):
    """1 where ``prob >= threshold`` (ties go to the positive class)."""
    out = (np.asarray(prob) >= threshold).astype(np.int64)
    return int(out) if out.ndim == 0 else out


class CapsProm:
    kind = "capsprom"

    def __init__(self, config: CapsPromConfig | None = None, seed: int = 0, dtype=np.float32,
                 loss_config: MarginLossConfig | None = None, params: dict | None = None):
        self.config = config or CapsPromConfig()
        self.loss_config = loss_config or MarginLossConfig()
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init_params(seed)
        self.embedding = EmbeddingTable(self.config.embedding_dim, weights=self.params["embedding"])

    @property
    def seq_len(self) -> int:
        return self.config.seq_len

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        c, dt = self.config, self.dtype
        rng = np.random.default_rng(seed)
        emb = EmbeddingTable(c.embedding_dim, rng=rng, dtype=dt).weights
        p = {"embedding": emb}
        p["conv1.kernels"] = glorot(
            rng, (c.conv_kernel, c.embedding_dim, c.conv_filters),
            c.conv_kernel * c.embedding_dim, c.conv_kernel * c.conv_filters, dt)
        p["conv1.bias"] = zeros(c.conv_filters, dt)
        p["pc_conv.kernels"] = glorot(
            rng, (c.pc_kernel, c.conv_filters, c.pc_filters),
            c.pc_kernel * c.conv_filters, c.pc_kernel * c.pc_filters, dt)
        p["pc_conv.bias"] = zeros(c.pc_filters, dt)
        p["digit.W"] = Tensor(
            rng.normal(0.0, 0.01, size=(c.n_primary, c.n_classes, c.digit_dim, c.pc_capsule_dim)).astype(dt),
            requires_grad=True)
        flat = c.n_classes * c.digit_dim
        if c.head_hidden:
            p["head_dense.weights"] = glorot(rng, (flat, c.head_hidden), flat, c.head_hidden, dt)
            p["head_dense.bias"] = zeros(c.head_hidden, dt)
            flat = c.head_hidden
        p["head_out.weights"] = glorot(rng, (flat, 1), flat, 1, dt)
        p["head_out.bias"] = zeros(1, dt)
        return p

    def encode(self, seqs) -> np.ndarray:
        return batch_indices(list(seqs))

    def _check_input(self, idx: np.ndarray) -> np.ndarray:
        if idx.ndim == 1:
            idx = idx[None]
        if idx.shape[1] != self.config.seq_len:
            raise SequenceLengthError(
                f"model expects {self.config.seq_len} bp, got {idx.shape[1]} bp")
        return idx

    def forward(self, x, trace: list | None = None):
        """Return ``(caps, prob, logits)`` for a sequence or an ``(N, L)`` index batch.

        A single string gives ``caps`` of shape ``(2, digit_dim)`` and scalar outputs.
        """
        single = isinstance(x, str) or np.asarray(x).ndim == 1
        idx = self.encode([x]) if isinstance(x, str) else self._check_input(np.asarray(x))
        idx = self._check_input(idx)
        p, c = self.params, self.config
        h = embed(idx, self.embedding)
        h = T.relu(T.conv1d(h, p["conv1.kernels"], p["conv1.bias"], stride=1))
        u = primary_caps(h, p, c)
        caps = route(u, p["digit.W"], c.routing_iters, trace)
        z = T.reshape(caps, (caps.shape[0], -1))
        if c.head_hidden:
            z = T.relu(z @ p["head_dense.weights"] + p["head_dense.bias"])
        logits = T.reshape(z @ p["head_out.weights"] + p["head_out.bias"], (-1,))
        prob = T.sigmoid(logits)
        if single:
            caps = T.reshape(caps, caps.shape[1:])
            logits = T.reshape(logits, ())
            prob = T.reshape(prob, ())
        return caps, prob, logits

    def loss_on_batch(self, x: np.ndarray, y: np.ndarray, weights=None):
        caps, prob, logits = self.forward(x)
        return loss(caps, logits, y, self.loss_config, weights), prob.data

    def predict_proba(self, x: np.ndarray, chunk: int = 128) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(x), chunk):
                out.append(np.atleast_1d(self.forward(x[i : i + chunk])[1].data))
        return np.concatenate(out) if out else np.zeros(0)

    def architecture(self) -> dict:
        return {"kind": self.kind, "model": self.config.to_dict(), "loss": asdict(self.loss_config)}

    @classmethod
    def from_architecture(cls, arch: dict, params: dict[str, Tensor]):
        dtype = next(iter(params.values())).dtype if params else np.float32
        return cls(CapsPromConfig(**arch["model"]), dtype=dtype,
                   loss_config=MarginLossConfig(**arch["loss"]), params=params)
