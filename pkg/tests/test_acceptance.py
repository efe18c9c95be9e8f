"""Acceptance gate. Each test prints one PASS/FAIL line for its criterion.

Criteria 6, 7 and 9 need the benchmark FASTA files in $CAPSPROM_DATA (or
~/.cache/capsprom); without them they fail and say so. The rest run on
generated inputs.

Run as a script for just the summary lines: ``python tests/test_acceptance.py``.
"""

import json
import math
import time

import numpy as np
import pytest

from capsprom import synthetic
from capsprom import tensor as T
from capsprom.capsnet import CapsProm, CapsPromConfig, primary_caps, squash
from capsprom.cli import main as cli_main
from capsprom.cnn import CnnConfig
from capsprom.data import (
    DataError,
    FoldPlan,
    default_data_dir,
    encode_records,
    load_dataset,
    stratified_kfold,
    stratified_subsample,
)
from capsprom.encoding import embed
from capsprom.metrics import ConfusionMatrix, compute
from capsprom.tensor import Tensor
from capsprom.train import TrainConfig, cross_validate, evaluate, make_model, train

from oracles import (
    end_to_end_gradcheck,
    metrics_from_pairs,
    naive_conv1d,
    naive_maxpool,
    numeric_grad,
    random_seqs,
    rel_err,
)

RESULTS: list[str] = []

# tolerances and budgets
PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3
GRADCHECK_BUDGET_S = 60
ORACLE_TOL = 1e-10
ORACLE_CASES = 200
METRIC_CASES = 100
ROUTING_PASSES = 100
ROW_SUM_TOL = 1e-6
COSINE_TOL = 1e-9
OVERFIT_ACC = 0.99
OVERFIT_EPOCHS = 200
BACILLUS_BUDGET_S = 30 * 60
BACILLUS_CNN_MCC = 0.70
BACILLUS_CAPS_MCC = 0.65
ECOLI_CNN_MCC = 0.70
ARABIDOPSIS_BUDGET_S = 2 * 60 * 60
ARABIDOPSIS_SN = 0.90
ARABIDOPSIS_SP = 0.93
SMOKE_SUBSAMPLE = 2000


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def real_dataset(key: str, n: int, title: str):
    """Records of ``key`` or a FAIL verdict naming the missing data."""
    data_dir = default_data_dir()
    try:
        return load_dataset(key, data_dir)
    except (DataError, OSError) as exc:
        verdict(n, title, False, f"{key} data unavailable in {data_dir} ({exc})")


# 1. gradients

def _primitive_cases(rng):
    def r(*shape):
        return rng.normal(size=shape)

    def pos(*shape):
        return rng.uniform(0.5, 2.0, size=shape)

    def away_from_zero(*shape):
        x = r(*shape)
        return x + np.sign(x) * 0.1

    idx = rng.integers(0, 4, size=(2, 5))
    return {
        "add": (lambda a, b: a + b, [r(3, 4), r(4)]),
        "sub": (lambda a, b: a - b, [r(3, 1), r(3, 4)]),
        "mul": (lambda a, b: a * b, [r(2, 3), r(2, 3)]),
        "div": (lambda a, b: a / b, [r(2, 3), pos(3)]),
        "neg": (lambda a: -a, [r(3)]),
        "square": (T.square, [r(2, 3)]),
        "sqrt": (T.sqrt, [pos(2, 3)]),
        "exp": (T.exp, [r(2, 3)]),
        "log": (T.log, [pos(2, 3)]),
        "relu": (T.relu, [away_from_zero(3, 4)]),
        "sigmoid": (T.sigmoid, [r(3, 4) * 3]),
        "softplus": (T.softplus, [r(3, 4) * 3]),
        "softmax": (lambda a: T.softmax(a, axis=1), [r(2, 3, 4)]),
        "reduce_sum": (lambda a: T.reduce_sum(a, axis=0), [r(3, 4)]),
        "mean": (lambda a: T.mean(a, axis=1, keepdims=True), [r(3, 4)]),
        "l2_norm": (lambda a: T.l2_norm(a, axis=-1), [r(3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [r(2, 6)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        "take_rows": (lambda a: T.take_rows(a, idx), [r(4, 3)]),
        "matmul": (T.matmul, [r(2, 3, 4), r(4, 5)]),
        "einsum": (lambda a, b: T.einsum("nid,ijed->nije", a, b), [r(2, 3, 4), r(3, 2, 5, 4)]),
        "conv1d_s1": (lambda x, w, b: T.conv1d(x, w, b, stride=1), [r(2, 10, 3), r(3, 3, 4), r(4)]),
        "conv1d_s2": (lambda x, w, b: T.conv1d(x, w, b, stride=2), [r(2, 11, 3), r(3, 3, 4), r(4)]),
        "maxpool": (lambda x: T.maxpool1d(x, 2), [r(2, 9, 3)]),
        "squash": (lambda s: squash(s), [r(2, 5, 4)]),
    }


def test_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {}
    for name, (op, arrays) in _primitive_cases(rng).items():
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = op(*tensors)
        probe = rng.normal(size=out.shape)
        T.reduce_sum(out * probe).backward()

        def f(*arrs):
            with T.no_grad():
                return float((op(*[Tensor(a) for a in arrs]).data * probe).sum())

        numeric = numeric_grad(f, [a.copy() for a in arrays])
        worst[name] = max(rel_err(t.grad, g) for t, g in zip(tensors, numeric))
    toy = CapsPromConfig(seq_len=20, embedding_dim=3, conv_filters=8, pc_channels=2, pc_capsule_dim=4,
                         digit_dim=6, head_hidden=8)
    assert toy.n_primary == 4
    e2e = end_to_end_gradcheck(toy)
    elapsed = time.perf_counter() - start
    prim_name = max(worst, key=worst.get)
    e2e_name = max(e2e, key=e2e.get)
    ok = worst[prim_name] < PRIMITIVE_TOL and e2e[e2e_name] < END_TO_END_TOL and elapsed < GRADCHECK_BUDGET_S
    verdict(1, "gradient correctness", ok,
            f"{len(worst)} primitives max rel err {worst[prim_name]:.2e} ({prim_name}) < {PRIMITIVE_TOL:g}; "
            f"end-to-end max {e2e[e2e_name]:.2e} ({e2e_name}) < {END_TO_END_TOL:g}; "
            f"{elapsed:.1f}s < {GRADCHECK_BUDGET_S}s")


# 2. oracle equivalence

def test_oracle_equivalence():
    rng = np.random.default_rng(1)
    conv_err = pool_err = 0.0
    for _ in range(ORACLE_CASES):
        K, cin, cout, stride = (int(v) for v in rng.integers(1, 6, size=4))
        stride = min(stride, 3)
        L = int(rng.integers(K, K + 20))
        x, w, b = rng.normal(size=(L, cin)), rng.normal(size=(K, cin, cout)), rng.normal(size=cout)
        got = T.conv1d(Tensor(x[None]), Tensor(w), Tensor(b), stride=stride).data[0]
        conv_err = max(conv_err, float(np.abs(got - naive_conv1d(x, w, b, stride)).max()))

        window = int(rng.integers(1, 5))
        C = int(rng.integers(1, 6))
        xp = rng.normal(size=(int(rng.integers(window, window + 20)), C))
        pstride = int(rng.integers(1, window + 1))
        got = T.maxpool1d(Tensor(xp[None]), window, pstride).data[0]
        pool_err = max(pool_err, float(np.abs(got - naive_maxpool(xp, window, pstride)).max()))

    mismatches = 0
    for _ in range(METRIC_CASES):
        n = int(rng.integers(1, 1001))
        actual = rng.integers(0, 2, size=n)
        # mix of random, perfect and inverted predictors
        mode = rng.integers(0, 3)
        pred = rng.integers(0, 2, size=n) if mode == 0 else (actual if mode == 1 else 1 - actual)
        got = compute(ConfusionMatrix.from_predictions(pred, actual)).as_dict()
        want = metrics_from_pairs(pred.tolist(), actual.tolist())
        mismatches += got != want
    ok = conv_err <= ORACLE_TOL and pool_err <= ORACLE_TOL and mismatches == 0
    verdict(2, "oracle equivalence", ok,
            f"conv1d max |diff| {conv_err:.1e}, maxpool {pool_err:.1e} over {ORACLE_CASES} cases each "
            f"(tol {ORACLE_TOL:g}); metrics {METRIC_CASES - mismatches}/{METRIC_CASES} exact")


# 3. routing invariants

def test_routing_invariants():
    rng = np.random.default_rng(2)
    worst_row, max_norm, min_norm, worst_cos, peak = 0.0, 0.0, 1.0, 1.0, 0.0
    cfg = CapsPromConfig()
    model = None
    for i in range(ROUTING_PASSES):
        if i % 10 == 0:
            model = CapsProm(cfg, seed=0)
            # random weights over a range of scales: flat to saturated capsules, uniform to peaked coupling
            sigma = 10 ** rng.uniform(-1.5, 0)
            for p in model.params.values():
                p.data = (rng.normal(size=p.shape) * sigma).astype(p.dtype)
        trace: list = []
        with T.no_grad():
            caps, _, _ = model.forward(model.encode(random_seqs(rng, 2, 81)), trace=trace)
        assert len(trace) == cfg.routing_iters
        for c in trace:
            worst_row = max(worst_row, float(np.abs(c.astype(np.float64).sum(axis=2) - 1).max()))
            peak = max(peak, float(c.max()))
        norms = np.linalg.norm(caps.data.astype(np.float64), axis=-1)
        max_norm, min_norm = max(max_norm, float(norms.max())), min(min_norm, float(norms.min()))

    for scale in (1e-3, 1e-1, 1.0, 10.0, 1e3):
        s = rng.normal(size=(200, 16)) * scale
        v = squash(Tensor(s)).data
        cos = (s * v).sum(-1) / (np.linalg.norm(s, axis=-1) * np.linalg.norm(v, axis=-1))
        worst_cos = min(worst_cos, float(cos.min()))
    ok = worst_row <= ROW_SUM_TOL and min_norm >= 0 and max_norm < 1 and worst_cos >= 1 - COSINE_TOL
    verdict(3, "routing invariants", ok,
            f"{ROUTING_PASSES} passes: max |row sum - 1| {worst_row:.1e} (tol {ROW_SUM_TOL:g}); "
            f"max coupling {peak:.4f}; capsule norms in [{min_norm:.3g}, {max_norm:.6f}]; squash min cosine 1 - {1 - worst_cos:.1e}")


# 4. shape ledger

def test_shape_ledger():
    found = {}
    for bp in (81, 251):
        cfg = CapsPromConfig(seq_len=bp)
        model = CapsProm(cfg, seed=0)
        with T.no_grad():
            h = T.relu(T.conv1d(embed(model.encode(["A" * bp]), model.embedding), model.params["conv1.kernels"],
                                model.params["conv1.bias"]))
            u = primary_caps(h, model.params, cfg)
        found[bp] = (u.shape[1], cfg.n_primary, u.shape[2])
    # valid conv k=9 then stride-2 k=9 conv, 32 capsule channels
    expected = {bp: ((bp - 8 - 9) // 2 + 1) * 32 for bp in (81, 251)}
    ok = all(found[bp][0] == found[bp][1] == expected[bp] for bp in found) and expected == {81: 1056, 251: 3776}
    verdict(4, "shape ledger", ok,
            f"81 bp -> {found[81][0]} primary capsules (expected 1056), 251 bp -> {found[251][0]} (expected 3776)")


# 5. determinism

def _small_config(path, model="capsprom", options=None):
    import yaml

    cfg = {"dataset": "Bacillus", "model": model, "k": 5, "seed": 7,
           "train": {"max_epochs": 3, "patience": 2, "batch_size": 16},
           "model_options": options if options is not None else
           {"conv_filters": 16, "pc_channels": 4, "pc_capsule_dim": 4, "head_hidden": 16}}
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def synthetic_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("bacillus_like")
    synthetic.write_dataset(d, "Bacillus", n_pos=40, n_neg=60, seed=4, noise=0.2)
    return d


def test_determinism(tmp_path, synthetic_dir):
    cfg = _small_config(tmp_path / "exp.yaml")
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli_main(["cross-validate", "--config", str(cfg), "--data-dir", str(synthetic_dir), "--out", str(out)])
        assert code == 0
        history = json.loads((out / "history.json").read_text())
        losses = {f: [e["train_loss"] for e in h["epochs"]] for f, h in history.items()}
        runs.append(((out / "folds.json").read_bytes(), losses, (out / "metrics.csv").read_bytes()))
    (fa, la, ma), (fb, lb, mb) = runs
    ok = fa == fb and la == lb and ma == mb
    n_epochs = sum(len(v) for v in la.values())
    verdict(5, "determinism", ok,
            f"fold plans {'identical' if fa == fb else 'differ'}, {n_epochs} per-epoch losses "
            f"{'identical' if la == lb else 'differ'}, metrics.csv {'identical' if ma == mb else 'differ'}")


# 6. overfit sanity

@pytest.mark.slow
def test_overfit_sanity():
    title = "overfit sanity"
    records = real_dataset("Bacillus", 6, title)
    subset = stratified_subsample(records, 100, seed=0, balanced=True)
    X, y = encode_records(subset)
    model = make_model("capsprom", X.shape[1], seed=0)
    accs = []

    def check(_record):
        _, cm = evaluate(model, X, y)
        accs.append(compute(cm).acc)
        return accs[-1] >= OVERFIT_ACC

    train(model, X, y, np.arange(len(y)), None,
          TrainConfig(max_epochs=OVERFIT_EPOCHS, early_stopping=False, seed=0), on_epoch=check)
    best = max(accs)
    verdict(6, title, best >= OVERFIT_ACC,
            f"training accuracy {best:.3f} after {len(accs)} epochs (need {OVERFIT_ACC} within {OVERFIT_EPOCHS})")


# 7. desk-scale reproduction

def _timed_cv(records, kind, plan, dataset, options=None):
    start = time.perf_counter()
    res = cross_validate(records, kind, TrainConfig(seed=0), plan=plan, dataset=dataset, options=options)
    return res, time.perf_counter() - start


@pytest.mark.slow
def test_desk_scale_reproduction():
    title = "desk-scale reproduction"
    bacillus = real_dataset("Bacillus", 7, title)
    ecoli = real_dataset("Ecoli", 7, title)
    plan = stratified_kfold(bacillus, 5, seed=0, dataset="Bacillus")
    cnn, t_cnn = _timed_cv(bacillus, "cnnprom", plan, "Bacillus", CnnConfig.for_dataset("Bacillus").to_dict())
    caps, t_caps = _timed_cv(bacillus, "capsprom", plan, "Bacillus")
    eplan = stratified_kfold(ecoli, 5, seed=0, dataset="Ecoli")
    ecnn, t_ecnn = _timed_cv(ecoli, "cnnprom", eplan, "Ecoli", CnnConfig.for_dataset("Ecoli").to_dict())
    m_cnn, m_caps, m_ecnn = (r.summary.mean["mcc"] for r in (cnn, caps, ecnn))
    ok = (m_cnn >= BACILLUS_CNN_MCC and m_caps >= BACILLUS_CAPS_MCC and m_ecnn >= ECOLI_CNN_MCC
          and t_cnn < BACILLUS_BUDGET_S and t_caps < BACILLUS_BUDGET_S)
    verdict(7, title, ok,
            f"Bacillus CNNProm Mcc {m_cnn:.3f} (>= {BACILLUS_CNN_MCC}, {t_cnn / 60:.1f} min), "
            f"CapsProm Mcc {m_caps:.3f} (>= {BACILLUS_CAPS_MCC}, {t_caps / 60:.1f} min, budget 30 min each); "
            f"Ecoli CNNProm Mcc {m_ecnn:.3f} (>= {ECOLI_CNN_MCC})")


# 8. cross-model fairness

def test_cross_model_fairness(tmp_path, synthetic_dir):
    folds = tmp_path / "folds.json"
    digests, test_sets = [], []
    for kind, options in (("capsprom", None), ("cnnprom", {
        "input_length": 81,
        "layers": [{"type": "conv", "filters": 8, "kernel": 9, "activation": "relu"},
                   {"type": "maxpool", "window": 2}, {"type": "flatten"},
                   {"type": "dense", "units": 1, "activation": "sigmoid"}]})):
        cfg = _small_config(tmp_path / f"{kind}.yaml", kind, options)
        out = tmp_path / kind
        assert cli_main(["cross-validate", "--config", str(cfg), "--data-dir", str(synthetic_dir),
                         "--folds-file", str(folds), "--out", str(out)]) == 0
        digests.append(json.loads((out / "run.json").read_text())["fold_plan_digest"])
        test_sets.append([
            [line.split(",")[0] for line in (out / f"predictions_fold{f}.csv").read_text().splitlines()[1:]]
            for f in range(5)])
    exported = FoldPlan.load(folds).digest()
    ok = digests[0] == digests[1] == exported and test_sets[0] == test_sets[1]
    verdict(8, "cross-model fairness", ok,
            f"CapsProm plan {digests[0][:12]}, CNNProm plan {digests[1][:12]}, exported {exported[:12]}; "
            f"test-set membership {'identical' if test_sets[0] == test_sets[1] else 'differs'}")


# 9. metric sanity against published bands

@pytest.mark.slow
def test_metric_sanity():
    title = "metric sanity"
    arab = real_dataset("Arabidopsis_tata", 9, title)
    plan = stratified_kfold(arab, 5, seed=0, dataset="Arabidopsis_tata")
    res, elapsed = _timed_cv(arab, "cnnprom", plan, "Arabidopsis_tata",
                             CnnConfig.for_dataset("Arabidopsis_tata").to_dict())
    sn, sp = res.summary.mean["sn"], res.summary.mean["sp"]
    smoke = {}
    for key in ("Human_non_tata", "Mouse_non_tata"):
        records = real_dataset(key, 9, title)
        sub = stratified_subsample(records, SMOKE_SUBSAMPLE, seed=0)
        r, t = _timed_cv(sub, "cnnprom", stratified_kfold(sub, 5, seed=0, dataset=key), key,
                         CnnConfig.for_dataset(key).to_dict())
        smoke[key] = (r.summary.mean["mcc"], t, all(math.isfinite(v) for v in r.summary.mean.values()))
    ok = (sn >= ARABIDOPSIS_SN and sp >= ARABIDOPSIS_SP and elapsed < ARABIDOPSIS_BUDGET_S
          and all(s[2] for s in smoke.values()))
    detail = "; ".join(f"{k} smoke ({SMOKE_SUBSAMPLE}) Mcc {m:.3f} in {t / 60:.1f} min" for k, (m, t, _) in smoke.items())
    verdict(9, title, ok,
            f"Arabidopsis TATA CNNProm Sn {sn:.3f} (>= {ARABIDOPSIS_SN}), Sp {sp:.3f} (>= {ARABIDOPSIS_SP}), "
            f"{elapsed / 60:.1f} min (< 120); {detail}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
