"""Synthetic promoter-like datasets laid out like the real ones.

Positives carry noisy -35 (TTGACA) and -10 (TATAAT) boxes; negatives are
background sequence. Used for smoke tests and offline demos only.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import REGISTRY, SequenceRecord, fetch_dataset, get_spec, write_fasta

_BOXES = ("TTGACA", "TATAAT")


def _background(rng: np.random.Generator, length: int) -> list[str]:
    return list(rng.choice(list("ACGT"), size=length, p=[0.3, 0.2, 0.2, 0.3]))


def _mutate(box: str, rng: np.random.Generator, rate: float) -> str:
    return "".join(rng.choice(list("ACGT")) if rng.random() < rate else ch for ch in box)


def make_records(n_pos: int, n_neg: int, bp: int = 81, seed: int = 0, dataset: str = "",
                 noise: float = 0.1) -> list[SequenceRecord]:
    if bp < 50:
        raise ValueError("synthetic promoters need at least 50 bp")
    rng = np.random.default_rng(seed)
    anchor = bp - 20  # stand-in transcription start site
    records = []
    for i in range(n_pos):
        seq = _background(rng, bp)
        spacer = int(rng.integers(15, 19))
        ten = anchor - 10 + int(rng.integers(-2, 3))
        for box, start in ((_BOXES[1], ten), (_BOXES[0], ten - spacer - 6)):
            seq[start : start + 6] = _mutate(box, rng, noise)
        records.append(SequenceRecord(f"pos{i}", "".join(seq), 1, dataset))
    for i in range(n_neg):
        records.append(SequenceRecord(f"neg{i}", "".join(_background(rng, bp)), 0, dataset))
    return records


def write_dataset(out_dir, key: str = "Bacillus", n_pos: int | None = None, n_neg: int | None = None,
                  seed: int = 0, noise: float = 0.1) -> list[SequenceRecord]:
    """Write positive/negative FASTA files under the registry names of ``key`` plus a manifest."""
    spec = get_spec(key)
    n_pos = spec.n_positive if n_pos is None else n_pos
    n_neg = spec.n_negative if n_neg is None else n_neg
    records = make_records(n_pos, n_neg, spec.bp, seed, key, noise)
    staging = Path(out_dir) / ".synthetic"
    staging.mkdir(parents=True, exist_ok=True)
    write_fasta([r for r in records if r.label == 1], staging / spec.positive_file, width=60)
    write_fasta([r for r in records if r.label == 0], staging / spec.negative_file, width=60)
    fetch_dataset(key, out_dir, offline_dir=staging, force=True)
    return records


__all__ = ["make_records", "write_dataset", "REGISTRY"]
