"""Nucleotide alphabet, one-hot vectors and a trainable embedding table."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, take_rows

ALPHABET = ("A", "C", "G", "T")
INDEX = {ch: i for i, ch in enumerate(ALPHABET)}

_LOOKUP = np.full(256, -1, dtype=np.int8)
for _ch, _i in INDEX.items():
    _LOOKUP[ord(_ch)] = _i
    _LOOKUP[ord(_ch.lower())] = _i


class InvalidSequenceError(ValueError):
    def __init__(self, position: int, char: str, record_id: str | None = None):
        self.position = position
        self.char = char
        self.record_id = record_id
        where = f" in record {record_id!r}" if record_id else ""
        super().__init__(f"invalid nucleotide {char!r} at position {position}{where}")


def to_indices(seq: str, record_id: str | None = None) -> np.ndarray:
    """Map a nucleotide string (any case) to integer codes 0..3."""
    raw = np.frombuffer(seq.encode("latin-1", errors="replace"), dtype=np.uint8)
    idx = _LOOKUP[raw]
    bad = np.flatnonzero(idx < 0)
    if bad.size:
        pos = int(bad[0])
        raise InvalidSequenceError(pos, seq[pos], record_id)
    return idx.astype(np.intp)


def batch_indices(seqs) -> np.ndarray:
    """(N, L) integer codes for equal-length sequences."""
    return np.stack([to_indices(s) for s in seqs]) if len(seqs) else np.zeros((0, 0), np.intp)


def one_hot(seq, dtype=np.float64) -> Tensor:
    """``(L, 4)`` one-hot rows, A=<1,0,0,0> ... T=<0,0,0,1>.

    Also accepts a precomputed index array of any shape, giving ``(..., 4)``.
    """
    idx = to_indices(seq) if isinstance(seq, str) else np.asarray(seq, dtype=np.intp)
    return Tensor(np.eye(len(ALPHABET), dtype=dtype)[idx])


class EmbeddingTable:
    """Learned ``(4, dim)`` vectors, one row per nucleotide."""

    def __init__(self, dim: int = 9, rng: np.random.Generator | None = None, dtype=np.float64, weights=None):
        if dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        if weights is None:
            rng = rng or np.random.default_rng(0)
            weights = rng.uniform(-0.05, 0.05, size=(len(ALPHABET), dim)).astype(dtype)
        self.weights = weights if isinstance(weights, Tensor) else Tensor(weights, requires_grad=True)
        if self.weights.shape != (len(ALPHABET), dim):
            raise ValueError(f"embedding weights must be (4, {dim}), got {self.weights.shape}")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def embed(seq, table: EmbeddingTable) -> Tensor:
    """Row ``t`` is the table row of nucleotide ``t``; ``seq`` may be a string or index array."""
    idx = to_indices(seq) if isinstance(seq, str) else np.asarray(seq, dtype=np.intp)
    return take_rows(table.weights, idx)
