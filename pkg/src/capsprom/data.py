"""Promoter datasets: FASTA I/O, the dataset registry, fetching, stratified
k-fold plans and batch iteration."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import urllib.request
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .encoding import InvalidSequenceError, to_indices

log = logging.getLogger(__name__)

DATA_ENV = "CAPSPROM_DATA"
SOURCE_URL = "https://raw.githubusercontent.com/solovictor/CNNPromoterData/master"
MANIFEST_NAME = "manifest.json"


class DataError(Exception):
    """Base class for dataset problems (missing files, bad digests, bad records)."""


class FastaFormatError(DataError):
    def __init__(self, msg: str, line: int | None = None, path=None):
        self.line = line
        where = f"{path}:" if path else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + msg)


class LengthMismatchError(DataError):
    pass


class DigestMismatchError(DataError):
    pass


class CountMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    sequence: str
    label: int  # 1 promoter, 0 non-promoter
    dataset: str = ""


@dataclass(frozen=True)
class DatasetSpec:
    key: str
    n_negative: int
    n_positive: int
    bp: int
    organism: str
    positive_file: str
    negative_file: str

    @property
    def total(self) -> int:
        return self.n_positive + self.n_negative


# counts and lengths are those of the published benchmark; file names follow the
# upstream repository layout and can be overridden through the manifest
REGISTRY: dict[str, DatasetSpec] = {
    spec.key: spec
    for spec in [
        DatasetSpec("Arabidopsis_non_tata", 11459, 5905, 251, "Eukaryotic",
                    "Arabidopsis_non_tata.fa", "Arabidopsis_non_prom_big.fa"),
        DatasetSpec("Arabidopsis_tata", 2879, 1497, 251, "Eukaryotic",
                    "Arabidopsis_tata.fa", "Arabidopsis_non_prom.fa"),
        DatasetSpec("Bacillus", 1000, 373, 81, "Prokaryotic", "Bacillus_prom.fa", "Bacillus_non_prom.fa"),
        DatasetSpec("Ecoli", 3000, 839, 81, "Prokaryotic", "Ecoli_prom.fa", "Ecoli_non_prom.fa"),
        DatasetSpec("Human_non_tata", 27731, 19811, 251, "Eukaryotic",
                    "human_non_tata.fa", "human_nonprom_big.fa"),
        DatasetSpec("Mouse_non_tata", 24822, 16283, 251, "Eukaryotic",
                    "Mouse_non_tata.fa", "Mouse_non_nonprom_big.fa"),
        DatasetSpec("Mouse_tata", 3530, 1255, 251, "Eukaryotic", "Mouse_tata.fa", "Mouse_nonprom.fa"),
    ]
}


def get_spec(key: str, registry: dict[str, DatasetSpec] = REGISTRY) -> DatasetSpec:
    try:
        return registry[key]
    except KeyError:
        raise DataError(f"unknown dataset {key!r}; valid keys: {', '.join(sorted(registry))}") from None


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "capsprom"))


# FASTA

def parse_fasta(path, label: int | None = None, dataset: str = "") -> list[SequenceRecord]:
    """One record per ``>`` header; wrapped sequence lines are joined.

    The record id is the first whitespace-separated token of the header.
    """
    records: list[SequenceRecord] = []
    header: str | None = None
    header_line = 0
    chunks: list[str] = []

    def flush():
        seq = "".join(chunks)
        if not seq:
            raise FastaFormatError(f"record {header!r} has an empty sequence", header_line, path)
        rid = header.split()[0] if header.split() else f"record{len(records)}"
        records.append(SequenceRecord(rid, seq.upper(), -1 if label is None else int(label), dataset))

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(">"):
                if header is not None:
                    flush()
                header, header_line, chunks = line[1:].strip(), lineno, []
            elif header is None:
                raise FastaFormatError("sequence data before the first '>' header", lineno, path)
            else:
                chunks.append(line)
    if header is not None:
        flush()
    return records


def write_fasta(records: Sequence[SequenceRecord], path, width: int = 0) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(f">{r.id}\n")
            seq = r.sequence
            if width:
                fh.write("\n".join(seq[i : i + width] for i in range(0, len(seq), width)) + "\n")
            else:
                fh.write(seq + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# manifest / fetching

def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        return {"format": 1, "source": SOURCE_URL, "datasets": {}}
    with open(path) as fh:
        return json.load(fh)


def write_manifest(data_dir, manifest: dict) -> None:
    path = Path(data_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset_files(key: str, manifest: dict, registry) -> dict[str, str]:
    spec = get_spec(key, registry)
    entry = manifest.get("datasets", {}).get(key, {})
    return {
        "positive": entry.get("positive", {}).get("file", spec.positive_file),
        "negative": entry.get("negative", {}).get("file", spec.negative_file),
    }


def fetch_dataset(key: str, out_dir, offline_dir=None, force: bool = False,
                  base_url: str = SOURCE_URL, registry=REGISTRY) -> bool:
    """Place the two FASTA files of ``key`` in ``out_dir`` and record their digests.

    Files come from ``offline_dir`` when given, otherwise from ``base_url``.
    Returns False when everything was already present and verified.
    """
    spec = get_spec(key, registry)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(out_dir)
    entry = manifest.setdefault("datasets", {}).setdefault(key, {})
    files = _dataset_files(key, manifest, registry)
    changed = False
    for role, name in files.items():
        target = out_dir / name
        known = entry.get(role, {}).get("sha256")
        if target.exists() and not force:
            digest = sha256_file(target)
            if known and digest != known:
                raise DigestMismatchError(f"{target}: sha256 {digest} does not match manifest {known}")
            if known:
                continue
        else:
            if offline_dir is not None:
                src = Path(offline_dir) / name
                if not src.exists():
                    raise DataError(f"{src} not found in offline directory")
                shutil.copyfile(src, target)
            else:
                url = f"{base_url}/{name}"
                log.info("downloading %s", url)
                tmp = target.with_suffix(target.suffix + ".part")
                try:
                    with urllib.request.urlopen(url, timeout=60) as resp, open(tmp, "wb") as fh:
                        shutil.copyfileobj(resp, fh)
                except OSError as exc:
                    tmp.unlink(missing_ok=True)
                    raise DataError(f"download of {url} failed: {exc}") from exc
                tmp.replace(target)
            digest = sha256_file(target)
            if known and digest != known:
                raise DigestMismatchError(f"{target}: sha256 {digest} does not match manifest {known}")
        entry[role] = {"file": name, "sha256": digest}
        changed = True
    entry.update({"bp": spec.bp, "expected": {"positive": spec.n_positive, "negative": spec.n_negative}})
    if changed:
        write_manifest(out_dir, manifest)
    return changed


def load_dataset(key: str, data_dir=None, registry=REGISTRY, strict: bool = False,
                 drop_invalid: bool = False) -> list[SequenceRecord]:
    """Positive records followed by negative records, in file order.

    Lengths must equal the registered bp. Counts that differ from the
    registry warn, or raise when ``strict``. Records with non-ACGT symbols
    raise unless ``drop_invalid``.
    """
    spec = get_spec(key, registry)
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    manifest = read_manifest(data_dir)
    entry = manifest.get("datasets", {}).get(key, {})
    files = _dataset_files(key, manifest, registry)
    records: list[SequenceRecord] = []
    dropped = 0
    for role, label in (("positive", 1), ("negative", 0)):
        path = data_dir / files[role]
        if not path.exists():
            raise DataError(f"{path} not found; run `capsprom fetch-data --dataset {key}` first")
        known = entry.get(role, {}).get("sha256")
        if known and sha256_file(path) != known:
            raise DigestMismatchError(f"{path} does not match the digest recorded in the manifest")
        for r in parse_fasta(path, label=label, dataset=key):
            try:
                to_indices(r.sequence, r.id)
            except InvalidSequenceError:
                if not drop_invalid:
                    raise
                dropped += 1
                continue
            if len(r.sequence) != spec.bp:
                raise LengthMismatchError(f"record {r.id!r} in {path.name} has {len(r.sequence)} bp, expected {spec.bp}")
            records.append(r)
    if dropped:
        log.warning("%s: dropped %d records with non-ACGT symbols", key, dropped)
    n_pos = sum(r.label for r in records)
    n_neg = len(records) - n_pos
    if (n_pos, n_neg) != (spec.n_positive, spec.n_negative):
        msg = f"{key}: found {n_pos} positive / {n_neg} negative, expected {spec.n_positive} / {spec.n_negative}"
        if strict:
            raise DataError(msg)
        warnings.warn(msg, CountMismatchWarning, stacklevel=2)
    return records


def labels_of(records: Sequence[SequenceRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def encode_records(records: Sequence[SequenceRecord]) -> tuple[np.ndarray, np.ndarray]:
    """``(N, L)`` nucleotide codes and ``(N,)`` labels."""
    if not records:
        return np.zeros((0, 0), dtype=np.intp), np.zeros(0, dtype=np.int64)
    X = np.stack([to_indices(r.sequence, r.id) for r in records])
    return X, labels_of(records)


def stratified_subsample(records: Sequence[SequenceRecord], n: int, seed: int = 0,
                         balanced: bool = False) -> list[SequenceRecord]:
    """Seeded subsample of ``n`` records preserving class ratio (or 50/50 when ``balanced``)."""
    y = labels_of(records)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    n_pos = n // 2 if balanced else int(round(n * len(pos) / len(y)))
    n_neg = n - n_pos
    if n_pos > len(pos) or n_neg > len(neg):
        raise DataError(f"cannot draw {n_pos} positive / {n_neg} negative records")
    rng = np.random.default_rng(seed)
    chosen = np.sort(np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)]))
    return [records[i] for i in chosen]


# fold plans

@dataclass
class FoldPlan:
    k: int
    seed: int
    assignments: np.ndarray  # record index -> fold
    ids: list[str] = field(default_factory=list)
    dataset: str = ""

    def test_indices(self, fold: int) -> np.ndarray:
        self._check_fold(fold)
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        self._check_fold(fold)
        return np.flatnonzero(self.assignments != fold)

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} outside 0..{self.k - 1}")

    def _payload(self) -> dict:
        return {"dataset": self.dataset, "k": int(self.k), "seed": int(self.seed),
                "ids": list(self.ids), "folds": [int(f) for f in self.assignments]}

    def digest(self) -> str:
        blob = json.dumps(self._payload(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_json(self) -> str:
        payload = self._payload()
        payload["format"] = 1
        payload["digest"] = self.digest()
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> FoldPlan:
        d = json.loads(text)
        plan = cls(k=d["k"], seed=d["seed"], assignments=np.array(d["folds"], dtype=np.int64),
                   ids=list(d["ids"]), dataset=d.get("dataset", ""))
        if d.get("digest") and d["digest"] != plan.digest():
            raise DigestMismatchError("fold plan digest does not match its contents")
        return plan

    @classmethod
    def load(cls, path) -> FoldPlan:
        return cls.from_json(Path(path).read_text())

    def check_records(self, records: Sequence[SequenceRecord]) -> None:
        """Raise unless the plan was made for exactly this record list."""
        if [r.id for r in records] != self.ids:
            raise DataError("fold plan does not match the record list (ids differ)")


def stratified_kfold(records, k: int = 5, seed: int = 0, dataset: str = "") -> FoldPlan:
    """Shuffle each class with ``seed`` and deal its members round-robin into ``k`` folds.

    ``records`` is a list of :class:`SequenceRecord` or a label array. The
    dealing position carries over between classes so fold sizes differ by at
    most one overall as well as per class.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(records) and isinstance(records[0], SequenceRecord):
        y = labels_of(records)
        ids = [r.id for r in records]
        dataset = dataset or records[0].dataset
    else:
        y = np.asarray(records, dtype=np.int64)
        ids = [str(i) for i in range(len(y))]
    rng = np.random.default_rng(seed)
    assignments = np.full(len(y), -1, dtype=np.int64)
    offset = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        if len(members) < k:
            raise DataError(f"class {cls} has {len(members)} samples, fewer than k={k}")
        members = rng.permutation(members)
        assignments[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    return FoldPlan(k=k, seed=seed, assignments=assignments, ids=ids, dataset=dataset)


def validation_split(indices: np.ndarray, y: np.ndarray, fraction: float = 0.1,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified seeded split of ``indices`` into (train, validation)."""
    rng = np.random.default_rng(seed)
    val = []
    for cls in np.unique(y[indices]):
        members = rng.permutation(indices[y[indices] == cls])
        n_val = int(round(fraction * len(members)))
        if fraction > 0 and len(members) > 1:
            n_val = min(max(n_val, 1), len(members) - 1)
        val.append(members[:n_val])
    val_idx = np.sort(np.concatenate(val)) if val else np.zeros(0, dtype=np.int64)
    train_idx = np.setdiff1d(indices, val_idx)
    return train_idx, val_idx


# batches

@dataclass
class Batch:
    indices: np.ndarray
    x: np.ndarray
    y: np.ndarray


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def iterate_batches(indices: np.ndarray, X: np.ndarray, y: np.ndarray, batch_size: int,
                    shuffle_rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Consecutive batches over ``indices``; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = shuffle_rng.permutation(indices) if shuffle_rng is not None else np.asarray(indices)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(idx, X[idx], y[idx])


def batches(X: np.ndarray, y: np.ndarray, plan: FoldPlan, fold: int, split: str, batch_size: int,
            seed: int = 0, epoch: int = 0) -> Iterator[Batch]:
    """Train batches (every fold but ``fold``, reshuffled per epoch) or test batches (in order)."""
    if split == "train":
        return iterate_batches(plan.train_indices(fold), X, y, batch_size, epoch_rng(seed, epoch))
    if split == "test":
        return iterate_batches(plan.test_indices(fold), X, y, batch_size)
    raise ValueError("split must be 'train' or 'test'")
