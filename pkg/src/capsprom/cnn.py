"""Config-driven CNN baselines over one-hot encoded sequences.

A config is an ordered list of layers. Schema (YAML or dict)::

    name: Bacillus            # free text
    input_length: 81
    input_channels: 4         # optional, always 4
    layers:
      - {type: conv, filters: 200, kernel: 21, activation: relu}   # stride 1, valid
      - {type: maxpool, window: 2}                                 # stride = window
      - {type: flatten}
      - {type: dense, units: 128, activation: relu}
      - {type: dense, units: 1, activation: sigmoid}               # required last layer

Activations: ``relu``, ``sigmoid`` or ``linear``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import tensor as T
from .capsnet import SequenceLengthError, binary_cross_entropy, glorot, zeros
from .encoding import batch_indices, one_hot
from .tensor import Tensor

CONFIG_DIR = Path(__file__).parent / "configs"
ACTIVATIONS = ("relu", "sigmoid", "linear")
_LAYER_KEYS = {
    "conv": {"type", "filters", "kernel", "activation"},
    "maxpool": {"type", "window"},
    "flatten": {"type"},
    "dense": {"type", "units", "activation"},
}


class InvalidConfigError(ValueError):
    pass


@dataclass
class CnnConfig:
    input_length: int
    layers: list[dict]
    input_channels: int = 4
    name: str = ""
    shapes: list[tuple[int, ...]] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.layers = [dict(layer) for layer in self.layers]
        self.shapes = self.validate()

    @classmethod
    def from_dict(cls, d: dict) -> CnnConfig:
        unknown = set(d) - {"name", "input_length", "input_channels", "layers"}
        if unknown:
            raise InvalidConfigError(f"unknown CNN config keys: {sorted(unknown)}")
        if "input_length" not in d or "layers" not in d:
            raise InvalidConfigError("CNN config needs 'input_length' and 'layers'")
        return cls(input_length=d["input_length"], layers=d["layers"],
                   input_channels=d.get("input_channels", 4), name=d.get("name", ""))

    @classmethod
    def load(cls, path) -> CnnConfig:
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    @classmethod
    def for_dataset(cls, key: str) -> CnnConfig:
        path = CONFIG_DIR / f"cnn_{key}.yaml"
        if not path.exists():
            raise InvalidConfigError(f"no shipped CNN config for dataset {key!r}")
        return cls.load(path)

    def to_dict(self) -> dict:
        return {"name": self.name, "input_length": self.input_length,
                "input_channels": self.input_channels, "layers": copy.deepcopy(self.layers)}

    def validate(self) -> list[tuple[int, ...]]:
        """Propagate shapes through the stack; returns the output shape of each layer."""
        if self.input_channels != 4:
            raise InvalidConfigError("input_channels must be 4 (one-hot nucleotides)")
        if not isinstance(self.input_length, int) or self.input_length < 1:
            raise InvalidConfigError("input_length must be a positive integer")
        if not self.layers:
            raise InvalidConfigError("layers must not be empty")
        shape: tuple[int, ...] = (self.input_length, self.input_channels)
        shapes = []
        for i, layer in enumerate(self.layers):
            kind = layer.get("type")
            where = f"layer {i} ({kind})"
            if kind not in _LAYER_KEYS:
                raise InvalidConfigError(f"{where}: unknown layer type")
            extra = set(layer) - _LAYER_KEYS[kind]
            missing = _LAYER_KEYS[kind] - set(layer) - {"activation"}
            if extra or missing:
                raise InvalidConfigError(f"{where}: unexpected keys {sorted(extra)} / missing {sorted(missing)}")
            if kind in ("conv", "dense"):
                layer.setdefault("activation", "linear")
                if layer["activation"] not in ACTIVATIONS:
                    raise InvalidConfigError(f"{where}: activation must be one of {ACTIVATIONS}")
            for key in ("filters", "kernel", "window", "units"):
                if key in layer and (not isinstance(layer[key], int) or layer[key] < 1):
                    raise InvalidConfigError(f"{where}: {key} must be a positive integer")
            if kind in ("conv", "maxpool"):
                if len(shape) != 2:
                    raise InvalidConfigError(f"{where}: needs a (length, channels) input, got {shape}")
                size = layer["kernel"] if kind == "conv" else layer["window"]
                if size > shape[0]:
                    raise InvalidConfigError(f"{where}: window {size} longer than input length {shape[0]}")
                if kind == "conv":
                    shape = (shape[0] - size + 1, layer["filters"])
                else:
                    shape = ((shape[0] - size) // size + 1, shape[1])
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            else:
                if len(shape) != 1:
                    raise InvalidConfigError(f"{where}: dense layer needs a flattened input, got {shape}")
                shape = (layer["units"],)
            shapes.append(shape)
        last = self.layers[-1]
        if last["type"] != "dense" or last["units"] != 1 or last["activation"] != "sigmoid":
            raise InvalidConfigError(f"layer {len(self.layers) - 1}: final layer must be dense(1, sigmoid)")
        return shapes


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return T.relu(x)
    if name == "sigmoid":
        return T.sigmoid(x)
    return x


class CnnProm:
    kind = "cnnprom"

    def __init__(self, config: CnnConfig, seed: int = 0, dtype=np.float32, params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init_params(seed)

    @property
    def seq_len(self) -> int:
        return self.config.input_length

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        shape: tuple[int, ...] = (self.config.input_length, self.config.input_channels)
        for i, (layer, out_shape) in enumerate(zip(self.config.layers, self.config.shapes)):
            if layer["type"] == "conv":
                K, cin, cout = layer["kernel"], shape[1], layer["filters"]
                p[f"{i}.conv.kernels"] = glorot(rng, (K, cin, cout), K * cin, K * cout, self.dtype)
                p[f"{i}.conv.bias"] = zeros(cout, self.dtype)
            elif layer["type"] == "dense":
                p[f"{i}.dense.weights"] = glorot(rng, (shape[0], layer["units"]), shape[0], layer["units"], self.dtype)
                p[f"{i}.dense.bias"] = zeros(layer["units"], self.dtype)
            shape = out_shape
        return p

    def encode(self, seqs) -> np.ndarray:
        return batch_indices(list(seqs))

    def _logits(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.config.input_length:
            raise SequenceLengthError(f"model expects {self.config.input_length} bp, got {x.shape[1]} bp")
        h = one_hot(x, dtype=self.dtype)
        for i, layer in enumerate(self.config.layers):
            kind = layer["type"]
            if kind == "conv":
                h = T.conv1d(h, self.params[f"{i}.conv.kernels"], self.params[f"{i}.conv.bias"], stride=1)
            elif kind == "maxpool":
                h = T.maxpool1d(h, layer["window"])
            elif kind == "flatten":
                h = T.reshape(h, (h.shape[0], -1))
            else:
                h = h @ self.params[f"{i}.dense.weights"] + self.params[f"{i}.dense.bias"]
            if i + 1 < len(self.config.layers) and kind in ("conv", "dense"):
                h = _activate(h, layer["activation"])
        # final sigmoid is applied by the caller so the loss can work on logits
        return T.reshape(h, (-1,))

    def forward(self, x):
        """Return ``(prob, logits)``; a string or 1-D input yields scalars."""
        single = isinstance(x, str) or np.asarray(x).ndim == 1
        if isinstance(x, str):
            x = self.encode([x])
        logits = self._logits(x)
        prob = T.sigmoid(logits)
        if single:
            return T.reshape(prob, ()), T.reshape(logits, ())
        return prob, logits

    def loss_on_batch(self, x: np.ndarray, y: np.ndarray, weights=None):
        prob, logits = self.forward(x)
        return binary_cross_entropy(logits, y, weights), prob.data

    def predict_proba(self, x: np.ndarray, chunk: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(x), chunk):
                out.append(np.atleast_1d(self.forward(x[i : i + chunk])[0].data))
        return np.concatenate(out) if out else np.zeros(0)

    def architecture(self) -> dict:
        return {"kind": self.kind, "model": self.config.to_dict()}

    @classmethod
    def from_architecture(cls, arch: dict, params: dict[str, Tensor]):
        dtype = next(iter(params.values())).dtype if params else np.float32
        return cls(CnnConfig.from_dict(arch["model"]), dtype=dtype, params=params)


def build(config: CnnConfig | dict, seed: int = 0, dtype=np.float32) -> CnnProm:
    if isinstance(config, dict):
        config = CnnConfig.from_dict(config)
    return CnnProm(config, seed=seed, dtype=dtype)
