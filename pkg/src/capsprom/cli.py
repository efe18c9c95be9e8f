"""capsprom command line.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .capsnet import SequenceLengthError, predict
from .checkpoint import CheckpointError, load_model, save_model
from .data import (
    DATA_ENV,
    REGISTRY,
    DataError,
    FoldPlan,
    default_data_dir,
    encode_records,
    fetch_dataset,
    get_spec,
    load_dataset,
    parse_fasta,
    read_manifest,
    stratified_kfold,
    stratified_subsample,
    validation_split,
)
from .encoding import InvalidSequenceError, to_indices
from .metrics import METRICS, compute, fold_rows, read_csv, write_csv
from .train import TrainingDivergedError, cross_validate, evaluate, make_model, train

log = logging.getLogger("capsprom")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
MODEL_COLORS = {"capsprom": "red", "cnnprom": "blue"}
MODEL_LABELS = {"capsprom": "CapsProm", "cnnprom": "CNNProm"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _data_dir(args, exp=None) -> Path:
    if getattr(args, "data_dir", None):
        return Path(args.data_dir)
    if exp is not None and exp.data_dir:
        return Path(exp.data_dir)
    return default_data_dir()


def _skip(path: Path, force: bool) -> bool:
    if path.exists() and not force:
        print(f"{path} already exists, nothing to do (use --force to redo)")
        return True
    return False


def _load_records(exp, args):
    data_dir = _data_dir(args, exp)
    records = load_dataset(exp.dataset, data_dir, drop_invalid=getattr(args, "drop_invalid", False))
    if exp.subsample:
        records = stratified_subsample(records, exp.subsample, seed=exp.seed)
    digests = read_manifest(data_dir).get("datasets", {}).get(exp.dataset, {})
    return records, digests


# subcommands

def cmd_fetch_data(args) -> int:
    keys = sorted(REGISTRY) if args.dataset == "all" else [args.dataset]
    for key in keys:
        get_spec(key)
    out = Path(args.out) if args.out else default_data_dir()
    for key in keys:
        changed = fetch_dataset(key, out, offline_dir=args.offline, force=args.force)
        print(f"{key}: {'fetched' if changed else 'up to date'} in {out}")
    return EXIT_OK


def cmd_cross_validate(args) -> int:
    exp = experiment.load(args.config, model=args.model, seed=args.seed)
    out = Path(args.out or f"runs/{exp.dataset}_{exp.model}_seed{exp.seed}")
    if _skip(out / "run.json", args.force):
        return EXIT_OK
    records, digests = _load_records(exp, args)
    plan = None
    if args.folds_file and Path(args.folds_file).exists():
        plan = FoldPlan.load(args.folds_file)
        if plan.k != exp.k:
            raise UsageError(f"--folds-file has k={plan.k}, config asks for k={exp.k}")
        log.info("using fold plan %s", args.folds_file)
    else:
        plan = stratified_kfold(records, exp.k, exp.seed, dataset=exp.dataset)
        if args.folds_file:
            Path(args.folds_file).parent.mkdir(parents=True, exist_ok=True)
            plan.save(args.folds_file)
            log.info("wrote fold plan %s", args.folds_file)
    extra = {"data": digests, "config_file": str(args.config), "experiment": exp.to_dict(), "seed": exp.seed}
    result = cross_validate(records, exp.model, exp.train, k=exp.k, options=exp.options_for_model(), plan=plan,
                            dataset=exp.dataset, out_dir=out, jobs=args.jobs, extra_manifest=extra)
    s = result.summary
    print(f"{exp.dataset} {exp.model} ({exp.k} folds, fold plan {result.plan_digest[:12]})")
    for m in METRICS:
        print(f"  {m:5s} {s.mean[m]:.4f} +- {s.sd[m]:.4f}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = experiment.load(args.config, model=args.model, seed=args.seed)
    out = Path(args.out or f"runs/{exp.dataset}_{exp.model}_seed{exp.seed}_full")
    if _skip(out / "model.ckpt", args.force):
        return EXIT_OK
    records, digests = _load_records(exp, args)
    X, y = encode_records(records)
    idx = np.arange(len(y))
    tr, va = validation_split(idx, y, exp.train.val_fraction, seed=exp.seed) if exp.train.val_fraction else (idx, None)
    model = make_model(exp.model, X.shape[1], exp.options_for_model(), seed=exp.seed, dtype=exp.train.dtype)
    history = train(model, X, y, tr, va, exp.train,
                    on_epoch=lambda r: log.info("epoch %d %s", r["epoch"], r))
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.json").write_text(json.dumps({"epochs": history.epochs, "best_epoch": history.best_epoch,
                                                  "stopped_early": history.stopped_early}, indent=1) + "\n")
    (out / "run.json").write_text(json.dumps({"experiment": exp.to_dict(), "data": digests, "seed": exp.seed,
                                              "n_train": len(tr), "n_val": 0 if va is None else len(va)},
                                             indent=1, sort_keys=True) + "\n")
    save_model(out / "model.ckpt", model, seed=exp.seed,
               metadata={"dataset": exp.dataset, "best_epoch": history.best_epoch})
    print(f"trained {exp.model} on {len(tr)} {exp.dataset} records, best epoch {history.best_epoch}; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    if _skip(out / "metrics.csv", args.force):
        return EXIT_OK
    model, ckpt = load_model(args.checkpoint, expected_kind=args.model)
    records = load_dataset(args.dataset, _data_dir(args), drop_invalid=args.drop_invalid)
    idx = np.arange(len(records))
    if args.folds_file:
        if args.fold is None:
            raise UsageError("--folds-file needs --fold")
        plan = FoldPlan.load(args.folds_file)
        plan.check_records(records)
        idx = plan.test_indices(args.fold)
    X, y = encode_records([records[i] for i in idx])
    probs, cm = evaluate(model, X, y, args.threshold)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", fold_rows(args.dataset, model.kind, [cm]))
    _write_prediction_rows(out / "predictions.csv", [records[i].id for i in idx], probs, args.threshold, y)
    m = compute(cm)
    print(" ".join(f"{k}={getattr(m, k):.4f}" for k in METRICS))
    return EXIT_OK


def _write_prediction_rows(path, ids, probs, threshold, labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "probability", "predicted"] + (["label"] if labels is not None else []))
        for i, (rid, p) in enumerate(zip(ids, probs)):
            row = [rid, repr(float(p)), int(predict(float(p), threshold))]
            w.writerow(row + ([int(labels[i])] if labels is not None else []))


def cmd_predict(args) -> int:
    out = Path(args.out)
    if _skip(out, args.force):
        return EXIT_OK
    model, _ = load_model(args.checkpoint)
    records = parse_fasta(args.fasta)
    ok_ids, rows, errors = [], [], []
    for r in records:
        try:
            idx = to_indices(r.sequence, r.id)
            if len(idx) != model.seq_len:
                raise SequenceLengthError(f"{len(idx)} bp, model expects {model.seq_len} bp")
        except (InvalidSequenceError, SequenceLengthError) as exc:
            errors.append((r.id, str(exc)))
            continue
        ok_ids.append(r.id)
        rows.append(idx)
    probs = model.predict_proba(np.stack(rows)) if rows else np.zeros(0)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_prediction_rows(out, ok_ids, probs, args.threshold)
    if errors:
        err_path = out.with_name(out.stem + ".errors.csv")
        with open(err_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "error"])
            w.writerows(errors)
        for rid, msg in errors:
            print(f"skipped {rid}: {msg}", file=sys.stderr)
        print(f"{len(errors)} record(s) skipped, see {err_path}", file=sys.stderr)
    print(f"{len(ok_ids)} prediction(s) written to {out}")
    return EXIT_OK


def find_runs(root: Path) -> tuple[list[dict], list[str]]:
    """Completed runs below ``root``; returns (runs, warnings)."""
    runs, problems = [], []
    for manifest in sorted(root.rglob("run.json")):
        run_dir = manifest.parent
        metrics_path = run_dir / "metrics.csv"
        if not metrics_path.exists():
            continue
        info = json.loads(manifest.read_text())
        k = info.get("config", {}).get("k")
        rows = [r for r in read_csv(metrics_path) if r["fold"].isdigit()]
        folds = sorted(int(r["fold"]) for r in rows)
        missing = sorted(set(range(k or 0)) - set(folds)) if k else []
        missing += [f for f in folds if not (run_dir / f"predictions_fold{f}.csv").exists()]
        if k is None or missing or not rows:
            problems.append(f"{run_dir}: incomplete run (missing folds {sorted(set(missing))}), excluded")
            continue
        runs.append({"dir": run_dir, "dataset": rows[0]["dataset"], "model": rows[0]["model"],
                     "values": {m: [float(r[m]) for r in rows] for m in METRICS}})
    return runs, problems


def cmd_report(args) -> int:
    out = Path(args.out)
    if _skip(out / "summary.csv", args.force):
        return EXIT_OK
    runs, problems = find_runs(Path(args.runs))
    for p in problems:
        print(f"warning: {p}", file=sys.stderr)
    if not runs:
        raise DataError(f"no completed runs found under {args.runs}")
    out.mkdir(parents=True, exist_ok=True)
    by_dataset: dict[str, dict[str, dict[str, list[float]]]] = {}
    for run in runs:
        for m in METRICS:
            by_dataset.setdefault(run["dataset"], {}).setdefault(run["model"], {}).setdefault(m, []).extend(
                run["values"][m])
    rows = []
    for dataset in sorted(by_dataset):
        for model in sorted(by_dataset[dataset]):
            for m in METRICS:
                v = np.array(by_dataset[dataset][model][m])
                sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
                rows.append({"dataset": dataset, "model": model, "metric": m, "mean": repr(float(v.mean())),
                             "sd": repr(sd), "n_folds": len(v)})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["dataset", "model", "metric", "mean", "sd", "n_folds"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _print_table(by_dataset)
    _boxplots(by_dataset, out)
    print(f"summary and plots in {out}")
    return EXIT_OK


def _print_table(by_dataset):
    head = f"{'dataset':22s} {'model':9s} " + " ".join(f"{m:>15s}" for m in METRICS)
    print(head)
    for dataset in sorted(by_dataset):
        for model in sorted(by_dataset[dataset]):
            vals = by_dataset[dataset][model]
            cells = []
            for m in METRICS:
                v = np.array(vals[m])
                sd = v.std(ddof=1) if len(v) > 1 else 0.0
                cells.append(f"{v.mean():.3f} +- {sd:.3f}".rjust(15))
            print(f"{dataset:22s} {MODEL_LABELS.get(model, model):9s} " + " ".join(cells))


def _boxplots(by_dataset, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for dataset, models in sorted(by_dataset.items()):
        names = sorted(models)
        for m in METRICS:
            fig, ax = plt.subplots(figsize=(3 + len(names), 4))
            parts = ax.boxplot([models[n][m] for n in names], patch_artist=True)
            ax.set_xticks(range(1, len(names) + 1), [MODEL_LABELS.get(n, n) for n in names])
            for patch, n in zip(parts["boxes"], names):
                patch.set_facecolor(MODEL_COLORS.get(n, "grey"))
                patch.set_alpha(0.6)
            ax.set_title(f"{dataset}: {m}")
            ax.set_ylabel(m)
            fig.tight_layout()
            fig.savefig(out / f"{dataset}_{m}.png", dpi=100)
            plt.close(fig)


# entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="capsprom", description="Capsule-network promoter classifier and CNN baseline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--force", action="store_true", help="redo even if outputs exist")
        if data:
            sp.add_argument("--data-dir", help=f"dataset directory (default ${DATA_ENV} or ~/.cache/capsprom)")
            sp.add_argument("--drop-invalid", action="store_true", help="drop records with non-ACGT symbols")

    sp = sub.add_parser("fetch-data", help="download or copy the benchmark FASTA files")
    sp.add_argument("--dataset", required=True, help="registry key or 'all'")
    sp.add_argument("--out", help=f"target directory (default ${DATA_ENV} or ~/.cache/capsprom)")
    sp.add_argument("--offline", help="copy the files from this directory instead of downloading")
    common(sp, data=False)
    sp.set_defaults(func=cmd_fetch_data)

    for name, func, helptext in (("cross-validate", cmd_cross_validate, "k-fold cross-validation"),
                                 ("train", cmd_train, "train one model on a whole dataset")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="experiment YAML")
        sp.add_argument("--model", choices=("capsprom", "cnnprom"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if name == "cross-validate":
            sp.add_argument("--folds-file", help="fold plan JSON; imported if present, else written")
            sp.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
        common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset or one fold of it")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model", choices=("capsprom", "cnnprom"), help="expected model kind")
    sp.add_argument("--folds-file")
    sp.add_argument("--fold", type=int)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="promoter probabilities for FASTA records")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--fasta", required=True)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--threshold", type=float, default=0.5)
    common(sp, data=False)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("report", help="summary table and per-metric boxplots of finished runs")
    sp.add_argument("--runs", required=True, help="directory searched for runs")
    sp.add_argument("--out", required=True)
    common(sp, data=False)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, experiment.ConfigError) as exc:
        print(f"capsprom: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidSequenceError, FileNotFoundError) as exc:
        print(f"capsprom: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, CheckpointError, SequenceLengthError, ValueError, RuntimeError, OSError) as exc:
        print(f"capsprom: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
