"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input requires
gradients the result records its parents and a closure that maps the
upstream gradient onto each parent; :meth:`Tensor.backward` replays those
closures in reverse topological order.

Shapes follow numpy broadcasting (trailing-dimension rules). Batched
variants of the layer primitives accept an optional leading batch axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "graph",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "exp",
    "log",
    "matmul",
    "einsum",
    "conv1d",
    "maxpool1d",
    "relu",
    "sigmoid",
    "softplus",
    "softmax",
    "reduce_sum",
    "mean",
    "l2_norm",
    "reshape",
    "transpose",
    "take_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``.

        Only scalar tensors may be differentiated without an explicit seed.
        Gradients add onto whatever is already stored; call ``zero_grad``
        between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")

        order = graph(self)
        upstream: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in upstream:
                    upstream[key] = upstream[key] + pg
                else:
                    upstream[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def graph(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


# activations

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),), "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) without overflow."""
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (x,), lambda g: (g * _stable_sigmoid(z),), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


# reductions

def _check_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        norm.append(ax % ndim)
    return tuple(norm) if isinstance(axis, tuple) else norm[0]


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        return (_expand_reduced(g / count, x.shape, axis, keepdims),)

    return _make(np.asarray(out), (x,), backward, "mean")


def l2_norm(x: Tensor, axis=-1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean length along ``axis``; ``eps`` is added under the root."""
    axis = _check_axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norm > 0, g / norm, 0.0)
        return (x.data * scale,)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(out, (x,), backward, "l2_norm")


# shape manipulation

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} ({x.data.size} elements) to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; ``index`` is an integer array of any shape."""
    index = np.asarray(index, dtype=np.intp)
    out = table.data[index]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), backward, "take_rows")


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def einsum(spec: str, *operands) -> Tensor:
    """Explicit-output einsum (``"ij,jk->ik"``) over tensors without repeated
    indices inside a single operand."""
    if "->" not in spec:
        raise ValueError("einsum spec must name its output explicitly")
    lhs, out_spec = spec.replace(" ", "").split("->")
    in_specs = lhs.split(",")
    if len(in_specs) != len(operands):
        raise ValueError(f"spec {spec!r} expects {len(in_specs)} operands")
    ops = [_as_tensor(o) for o in operands]
    sizes: dict[str, int] = {}
    for s, t in zip(in_specs, ops):
        if len(s) != t.ndim or len(set(s)) != len(s):
            raise ShapeError(f"operand of shape {t.shape} does not match subscripts {s!r}")
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"index {ch!r} has sizes {sizes[ch]} and {n}")
    out = np.einsum(spec, *[t.data for t in ops], optimize=True)

    def backward(g):
        grads = []
        for k, (s, t) in enumerate(zip(in_specs, ops)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [in_specs[m] for m in range(len(ops)) if m != k]
            present = set(out_spec).union(*others)
            kept = "".join(ch for ch in s if ch in present)
            sub_spec = ",".join([out_spec, *others]) + "->" + kept
            gk = np.einsum(sub_spec, g, *[ops[m].data for m in range(len(ops)) if m != k], optimize=True)
            if kept != s:
                # index summed by this operand alone: gradient is constant along it
                gk = np.broadcast_to(_insert_axes(gk, s, kept), [sizes[ch] for ch in s])
            grads.append(np.ascontiguousarray(gk))
        return grads

    return _make(np.asarray(out), ops, backward, "einsum")


def _insert_axes(arr: np.ndarray, full: str, kept: str) -> np.ndarray:
    shape = []
    it = iter(arr.shape)
    for ch in full:
        shape.append(next(it) if ch in kept else 1)
    return arr.reshape(shape)


# convolution / pooling over (length, channels) layouts

def _windows(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    # (..., L, C) -> (..., L', size, C)
    w = sliding_window_view(x, size, axis=-2)[..., ::stride, :, :]
    return np.swapaxes(w, -1, -2)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution.

    ``x`` is ``(L, Cin)`` or ``(N, L, Cin)``, ``kernels`` is ``(K, Cin, Cout)``.
    ``out[t, o] = bias[o] + sum_{k,c} x[t*stride + k, c] * kernels[k, c, o]``.
    """
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be (K, Cin, Cout), got {kernels.shape}")
    K, cin, cout = kernels.shape
    if x.ndim not in (2, 3) or x.shape[-1] != cin:
        raise ShapeError(f"input {x.shape} does not end in {cin} channels")
    L = x.shape[-2]
    if L < K:
        raise ShapeError(f"input length {L} is shorter than kernel length {K}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    lead = x.shape[:-2]
    L_out = (L - K) // stride + 1
    cols = _windows(x.data, K, stride).reshape(-1, K * cin)
    wmat = kernels.data.reshape(K * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, L_out, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout) if kernels.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(*lead, L_out, K, cin)
            gx = np.zeros_like(x.data)
            span = stride * (L_out - 1) + 1
            for k in range(K):
                gx[..., k : k + span : stride, :] += dcols[..., :, k, :]
        return gx, gw, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, lambda g: backward(g)[: len(parents)], "conv1d")


def maxpool1d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max over length windows of ``(L, C)`` or ``(N, L, C)``; stride defaults to window."""
    stride = window if stride is None else stride
    L = x.shape[-2]
    if L < window:
        raise ShapeError(f"input length {L} is shorter than pool window {window}")
    w = _windows(x.data, window, stride)  # (..., L', window, C)
    arg = w.argmax(axis=-2)
    out = np.take_along_axis(w, arg[..., None, :], axis=-2)[..., 0, :]
    L_out = out.shape[-2]

    def backward(g):
        gx = np.zeros_like(x.data)
        src = arg + (np.arange(L_out) * stride)[:, None]
        if stride >= window:
            np.put_along_axis(gx, src, g, axis=-2)
        else:
            # overlapping windows may share a winner; add one output row at a time
            for t in range(L_out):
                rows = src[..., t : t + 1, :]
                cur = np.take_along_axis(gx, rows, axis=-2)
                np.put_along_axis(gx, rows, cur + g[..., t : t + 1, :], axis=-2)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool1d")
