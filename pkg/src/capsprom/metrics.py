"""Confusion matrices, the six binary-classification metrics and fold aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

METRICS = ("prec", "sn", "f1", "sp", "acc", "mcc")
CSV_COLUMNS = ("dataset", "model", "fold", "tp", "tn", "fp", "fn", *METRICS, "undefined")
_BIG = 2**52


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @classmethod
    def from_predictions(cls, predicted, actual) -> ConfusionMatrix:
        p = np.asarray(predicted).astype(bool)
        a = np.asarray(actual).astype(bool)
        if p.shape != a.shape:
            raise ValueError("predicted and actual differ in length")
        return cls(int(np.sum(p & a)), int(np.sum(~p & ~a)), int(np.sum(p & ~a)), int(np.sum(~p & a)))


def accumulate(cm: ConfusionMatrix, predicted: int, actual: int) -> ConfusionMatrix:
    """``cm`` with the counter for one (predicted, actual) pair incremented."""
    if predicted:
        return ConfusionMatrix(cm.tp + 1, cm.tn, cm.fp, cm.fn) if actual else ConfusionMatrix(cm.tp, cm.tn, cm.fp + 1, cm.fn)
    return ConfusionMatrix(cm.tp, cm.tn, cm.fp, cm.fn + 1) if actual else ConfusionMatrix(cm.tp, cm.tn + 1, cm.fp, cm.fn)


@dataclass(frozen=True)
class Metrics:
    prec: float
    sn: float
    f1: float
    sp: float
    acc: float
    mcc: float
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def mcc(cm: ConfusionMatrix) -> float | None:
    """Matthews correlation with the (TP*TN - FP*FN) numerator; None when undefined."""
    factors = (cm.tp + cm.fp, cm.tp + cm.fn, cm.tn + cm.fp, cm.tn + cm.fn)
    if 0 in factors:
        return None
    num = float(cm.tp * cm.tn - cm.fp * cm.fn)
    if max(factors) > _BIG:
        den = math.exp(0.5 * sum(math.log(f) for f in factors))
    else:
        den = math.sqrt(factors[0] * factors[1] * factors[2] * factors[3])
    return num / den


def compute(cm: ConfusionMatrix) -> Metrics:
    """Zero denominators give 0 and list the metric in ``undefined``."""
    if cm.total == 0:
        raise ValueError("cannot compute metrics of an empty confusion matrix")
    undefined: list[str] = []
    prec = _ratio(cm.tp, cm.tp + cm.fp, "prec", undefined)
    sn = _ratio(cm.tp, cm.tp + cm.fn, "sn", undefined)
    f1 = _ratio(2 * prec * sn, prec + sn, "f1", undefined)
    sp = _ratio(cm.tn, cm.tn + cm.fp, "sp", undefined)
    acc = (cm.tp + cm.tn) / cm.total
    m = mcc(cm)
    if m is None:
        undefined.append("mcc")
        m = 0.0
    return Metrics(prec, sn, f1, sp, acc, m, tuple(undefined))


@dataclass
class MetricsSummary:
    per_fold: list[Metrics]
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)


def aggregate(per_fold: Sequence[Metrics]) -> MetricsSummary:
    """Mean and sample standard deviation (0 for a single fold) of each metric."""
    if not per_fold:
        raise ValueError("no folds to aggregate")
    mean, sd = {}, {}
    for m in METRICS:
        vals = np.array(sorted(getattr(f, m) for f in per_fold))  # sorted: order-invariant sums
        mean[m] = float(vals.mean())
        sd[m] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return MetricsSummary(list(per_fold), mean, sd)


def fold_rows(dataset: str, model: str, cms: Sequence[ConfusionMatrix]) -> list[dict]:
    """CSV rows: one per fold, then ``mean`` and ``sd`` summary rows."""
    rows, reports = [], []
    for i, cm in enumerate(cms):
        m = compute(cm)
        reports.append(m)
        rows.append({"dataset": dataset, "model": model, "fold": str(i), "tp": cm.tp, "tn": cm.tn,
                     "fp": cm.fp, "fn": cm.fn, **{k: repr(v) for k, v in m.as_dict().items()},
                     "undefined": ";".join(m.undefined)})
    summary = aggregate(reports)
    total = sum(cms, ConfusionMatrix())
    for label, values in (("mean", summary.mean), ("sd", summary.sd)):
        rows.append({"dataset": dataset, "model": model, "fold": label, "tp": total.tp, "tn": total.tn,
                     "fp": total.fp, "fn": total.fn, **{k: repr(v) for k, v in values.items()},
                     "undefined": ";".join(sorted({u for m in reports for u in m.undefined}))})
    return rows


def write_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
