"""Training loop, early stopping and the k-fold cross-validation runner."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .capsnet import CapsProm, CapsPromConfig, MarginLossConfig, predict
from .checkpoint import save_model
from .cnn import CnnConfig, CnnProm
from .data import FoldPlan, SequenceRecord, encode_records, epoch_rng, iterate_batches, stratified_kfold, validation_split
from .metrics import ConfusionMatrix, Metrics, MetricsSummary, aggregate, compute, fold_rows, write_csv
from .optim import Adam

log = logging.getLogger(__name__)

MODEL_KINDS = ("capsprom", "cnnprom")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    early_stopping: bool = True
    patience: int = 5
    val_fraction: float = 0.1
    class_weight: bool = False
    threshold: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"optimizer: unsupported {self.optimizer!r} (only 'adam')")
        if self.lr < 0:
            raise ValueError("lr: must be >= 0")
        for name in ("batch_size", "max_epochs", "patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name}: must be a positive integer")
        if self.early_stopping and self.patience >= self.max_epochs:
            raise ValueError("patience: must be smaller than max_epochs")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction: must be in [0, 1)")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold: must be in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype: must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mcc: float = float("nan")
    stopped_early: bool = False

    @property
    def train_loss(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]


def make_model(kind: str, seq_len: int, options: dict | None = None, seed: int = 0, dtype="float32"):
    """Fresh CapsProm or CnnProm. ``options`` holds CapsProm geometry/loss keys or a CNN config."""
    options = dict(options or {})
    if kind == "capsprom":
        loss_keys = {f.name for f in fields(MarginLossConfig)}
        loss_opts = {k: options.pop(k) for k in list(options) if k in loss_keys}
        return CapsProm(CapsPromConfig(seq_len=seq_len, **options), seed=seed, dtype=dtype,
                        loss_config=MarginLossConfig(**loss_opts))
    if kind == "cnnprom":
        cfg = CnnConfig.from_dict(options)
        if cfg.input_length != seq_len:
            raise ValueError(f"CNN config expects {cfg.input_length} bp, data has {seq_len} bp")
        return CnnProm(cfg, seed=seed, dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def class_weights(y: np.ndarray) -> np.ndarray:
    """Per-sample inverse class-frequency weights (mean 1 over a balanced set)."""
    counts = np.bincount(y, minlength=2).astype(float)
    per_class = np.where(counts > 0, len(y) / (2.0 * np.maximum(counts, 1)), 0.0)
    return per_class[y]


def evaluate(model, X: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, ConfusionMatrix]:
    probs = model.predict_proba(X)
    return probs, ConfusionMatrix.from_predictions(predict(probs, threshold), y)


def validation_loss(model, X: np.ndarray, y: np.ndarray, chunk: int = 128) -> float:
    total = 0.0
    with T.no_grad():
        for i in range(0, len(y), chunk):
            total += model.loss_on_batch(X[i : i + chunk], y[i : i + chunk])[0].item() * len(y[i : i + chunk])
    return total / len(y)


def train(model, X: np.ndarray, y: np.ndarray, train_idx: np.ndarray, val_idx: np.ndarray | None,
          cfg: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> History:
    """Minimise the model loss with Adam; keeps the parameters of the best validation Mcc.

    Equal Mcc values are ranked by validation loss, for both model selection
    and the early-stopping patience counter.

    Without validation data the final-epoch parameters are kept. A truthy
    return from ``on_epoch`` ends training after that epoch.
    """
    if len(train_idx) == 0:
        raise ValueError("no training samples")
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    weights = class_weights(y) if cfg.class_weight else None
    use_val = val_idx is not None and len(val_idx) > 0
    history = History()
    best_state = None
    best_loss = float("inf")
    since_best = 0
    for epoch in range(cfg.max_epochs):
        total, seen = 0.0, 0
        for batch in iterate_batches(train_idx, X, y, cfg.batch_size, epoch_rng(cfg.seed, epoch)):
            opt.zero_grad()
            w = weights[batch.indices] if weights is not None else None
            loss, _ = model.loss_on_batch(batch.x, batch.y, w)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += value * len(batch.indices)
            seen += len(batch.indices)
        record = {"epoch": epoch, "train_loss": total / seen}
        if use_val:
            _, cm = evaluate(model, X[val_idx], y[val_idx], cfg.threshold)
            m = compute(cm)
            val_loss = validation_loss(model, X[val_idx], y[val_idx])
            record.update(val_mcc=m.mcc, val_acc=m.acc, val_loss=val_loss)
            # ties on Mcc (common while the model still predicts one class) go to the lower loss
            if best_state is None or (m.mcc, -val_loss) > (history.best_val_mcc, -best_loss):
                history.best_epoch, history.best_val_mcc, best_loss = epoch, m.mcc, val_loss
                best_state = {k: p.data.copy() for k, p in model.params.items()}
                since_best = 0
            else:
                since_best += 1
        history.epochs.append(record)
        if on_epoch is not None and on_epoch(record):
            break
        if use_val and cfg.early_stopping and since_best >= cfg.patience:
            history.stopped_early = True
            break
    if best_state is not None:
        for k, p in model.params.items():
            p.data = best_state[k]
    else:
        history.best_epoch = len(history.epochs) - 1
    for p in model.params.values():
        p.zero_grad()
    return history


@dataclass
class FoldResult:
    fold: int
    confusion: ConfusionMatrix
    metrics: Metrics
    history: History
    seconds: float
    ids: list[str]
    probs: np.ndarray
    labels: np.ndarray
    model: object = None


@dataclass
class ExperimentResult:
    dataset: str
    model_kind: str
    plan: FoldPlan
    folds: list[FoldResult]
    config: dict

    @property
    def summary(self) -> MetricsSummary:
        return aggregate([f.metrics for f in self.folds])

    @property
    def plan_digest(self) -> str:
        return self.plan.digest()


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(fold, X, y, ids, plan, kind, options, cfg: TrainConfig, keep_model: bool) -> FoldResult:
    start = time.perf_counter()
    fseed = fold_seed(cfg.seed, fold)
    train_all = plan.train_indices(fold)
    tr, va = validation_split(train_all, y, cfg.val_fraction, seed=fseed) if cfg.val_fraction else (train_all, None)
    model = make_model(kind, X.shape[1], options, seed=fseed, dtype=cfg.dtype)
    fold_cfg = TrainConfig(**{**asdict(cfg), "seed": fseed})
    history = train(model, X, y, tr, va, fold_cfg,
                    on_epoch=lambda r: log.info("fold %d epoch %d %s", fold, r["epoch"], r))
    test = plan.test_indices(fold)
    probs, cm = evaluate(model, X[test], y[test], cfg.threshold)
    return FoldResult(fold, cm, compute(cm), history, time.perf_counter() - start,
                      [ids[i] for i in test], probs, y[test], model if keep_model else None)


def cross_validate(records: Sequence[SequenceRecord], kind: str, cfg: TrainConfig | None = None, k: int = 5,
                   options: dict | None = None, plan: FoldPlan | None = None, dataset: str = "",
                   out_dir=None, jobs: int = 1, extra_manifest: dict | None = None) -> ExperimentResult:
    """Train on k-1 folds (minus a stratified validation slice), test on the held-out fold.

    Passing the same ``plan`` to both model kinds gives both the same partitions.
    """
    cfg = cfg or TrainConfig()
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    dataset = dataset or (records[0].dataset if records else "")
    if plan is None:
        plan = stratified_kfold(records, k, cfg.seed, dataset=dataset)
    else:
        plan.check_records(records)
    X, y = encode_records(records)
    ids = [r.id for r in records]
    args = (X, y, ids, plan, kind, options, cfg, out_dir is not None)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_star, [(f, *args) for f in range(plan.k)]))
    else:
        folds = [_run_fold(f, *args) for f in range(plan.k)]
    config = {"dataset": dataset, "model": kind, "k": plan.k, "seed": cfg.seed, "train": asdict(cfg),
              "options": options or {}}
    result = ExperimentResult(dataset, kind, plan, folds, config)
    if out_dir is not None:
        write_outputs(result, Path(out_dir), extra_manifest)
    return result


def _run_fold_star(args):
    return _run_fold(*args)


def write_predictions(path, fold: FoldResult, threshold: float = 0.5) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "prob", "label", "predicted"])
        for rid, p, label in zip(fold.ids, fold.probs, fold.labels):
            w.writerow([rid, repr(float(p)), int(label), int(p >= threshold)])


def write_outputs(result: ExperimentResult, out_dir: Path, extra_manifest: dict | None = None) -> None:
    """metrics.csv, per-fold predictions and checkpoints, folds.json, history.json, run.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "metrics.csv", fold_rows(result.dataset, result.model_kind, [f.confusion for f in result.folds]))
    result.plan.save(out_dir / "folds.json")
    threshold = result.config["train"]["threshold"]
    for f in result.folds:
        write_predictions(out_dir / f"predictions_fold{f.fold}.csv", f, threshold)
        if f.model is not None:
            save_model(out_dir / f"model_fold{f.fold}.ckpt", f.model, seed=fold_seed(result.config["seed"], f.fold),
                       metadata={"dataset": result.dataset, "fold": f.fold, "best_epoch": f.history.best_epoch,
                                 "fold_plan": result.plan_digest})
    history = {str(f.fold): {"epochs": f.history.epochs, "best_epoch": f.history.best_epoch,
                             "stopped_early": f.history.stopped_early} for f in result.folds}
    (out_dir / "history.json").write_text(json.dumps(history, indent=1, sort_keys=True) + "\n")
    manifest = {"config": result.config, "fold_plan_digest": result.plan_digest,
                "fold_seeds": {str(f.fold): fold_seed(result.config["seed"], f.fold) for f in result.folds},
                "seconds": {str(f.fold): round(f.seconds, 3) for f in result.folds},
                **(extra_manifest or {})}
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
