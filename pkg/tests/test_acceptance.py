"""Acceptance criteria, each checked at its stated tolerance and runtime budget.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL`` line with the measured
values, then asserts. Criteria 6 and 7 share one set of training runs.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_instance, unit_rows
from surrogates import QuadBatch, quad_loss
from xbmeta.cli import grad_check
from xbmeta.core import Batch, SimilarityClassifier, init_params, loss_and_grad
from xbmeta.data import DatasetSpec, generate_dataset, static_oracle_predict
from xbmeta.ensemble import GwaState, gaussian_weight, gwa_finalize, gwa_update, normalize_weights
from xbmeta.meta import MetaStepConfig, MetaTask, first_order_meta_grad, fomaml_step, second_order_meta_grad
from xbmeta.metrics import evaluate, harmonic_mean
from xbmeta.params import ParamVector
from xbmeta.train import TrainConfig, train

pytestmark = pytest.mark.slow

DEBIAS_SPEC = dict(k_base=10, k_novel=10, d_motion=8, d_static=8, n_contexts=10, bias_rho=0.9,
                   noise_sigma=0.1, samples_per_class_train=200)
SEEDS = range(10)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, elapsed, budget):
        in_time = elapsed < budget
        status = "PASS" if ok and in_time else "FAIL"
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {status}: {detail}; runtime {elapsed:.1f}s (budget {budget:.0f}s)")
        return ok and in_time
    return emit


def test_1_gradient_oracle(report):
    t0 = time.perf_counter()
    worst = grad_check(seed=0, trials=100, h=1e-5)
    ok = report(1, worst < 1e-6, f"max relative error {worst:.2e} over 100 instances (< 1e-6)",
                time.perf_counter() - t0, 30)
    assert ok


def _cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_2_first_order_fidelity(report):
    t0 = time.perf_counter()
    theta = ParamVector([1.0], [("theta", [1])])
    task = MetaTask(QuadBatch(0.0, sample_ids=(0,)), QuadBatch(1.0, sample_ids=(1,)))
    exact = second_order_meta_grad(theta, task, 0.1, None, 1e-5, quad_loss).values[0]
    fo = first_order_meta_grad(theta, [task], 0.1, 1.0, None, quad_loss)[0].values[0]
    quad_ok = abs(exact - 0.91) <= 1e-9 and abs(fo - 0.90) <= 1e-9

    rng = np.random.default_rng(20)
    clf = SimilarityClassifier(unit_rows(rng, 4, 3), [5, 5, 3], 10.0)
    p = init_params(clf, 3)
    assert len(p) <= 60
    b = 6
    s = Batch(rng.normal(size=(b, 5)), rng.integers(0, 4, b), np.arange(b))
    q = Batch(rng.normal(size=(b, 5)), rng.integers(0, 4, b), np.arange(b, 2 * b))
    cos = []
    for alpha in (1e-1, 1e-2, 1e-3, 1e-4):
        g_ex = second_order_meta_grad(p, MetaTask(s, q), alpha, clf).values
        g_fo = first_order_meta_grad(p, [MetaTask(s, q)], alpha, 1.0, clf)[0].values
        cos.append(_cosine(g_fo, g_ex))
    mono = all(b >= a for a, b in zip(cos, cos[1:]))
    ok = quad_ok and cos[-1] >= 0.999 and mono
    detail = (f"quadratic exact {exact:.12f} first-order {fo:.12f}; {len(p)} params, "
              f"cosines {', '.join(f'{c:.9f}' for c in cos)}")
    assert report(2, ok, detail, time.perf_counter() - t0, 120)


def test_3_delta_zero_reduction(report):
    t0 = time.perf_counter()
    equal = 0
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        clf, p, _ = random_instance(rng)
        n = int(rng.integers(1, 5))
        tasks = []
        for i in range(n):
            x = rng.normal(size=(8, clf.d_in))
            y = rng.integers(0, clf.n_classes, 8)
            tasks.append(MetaTask(Batch(x[:4], y[:4], np.arange(4)), Batch(x[4:], y[4:], np.arange(4, 8))))
        beta = float(rng.uniform(1e-3, 1e-1))
        new, _ = fomaml_step(p, tasks, MetaStepConfig(float(rng.uniform(0, 0.5)), beta, 0.0, n), clf)
        acc = loss_and_grad(p, tasks[0].support, clf)[1].values
        for t in tasks[1:]:
            acc = acc + loss_and_grad(p, t.support, clf)[1].values
        equal += new.values.tobytes() == (p.values - beta * acc).tobytes()
    assert report(3, equal == 20, f"{equal}/20 cases bitwise equal", time.perf_counter() - t0, 10)


def test_4_gwa_equivalence(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(400 + seed)
        R = int(rng.integers(1, 51))
        mu, sigma2 = float(rng.uniform(1, R)), float(rng.uniform(2, 30))
        layout = [("W1", [3, 4]), ("b1", [3])]
        thetas = [ParamVector(rng.normal(size=15), layout) for _ in range(R)]
        state = GwaState.start(R, 1, mu, sigma2)
        for th in thetas:
            state = gwa_update(state, th)
        stream = gwa_finalize(state).values
        alphas = normalize_weights([gaussian_weight(t, mu, sigma2) for t in range(1, R + 1)])
        direct = sum(a * th.values for a, th in zip(alphas, thetas))
        worst = max(worst, float(np.linalg.norm(stream - direct) / np.linalg.norm(direct)))
    sym = all(gaussian_weight(7 + k, 7, 10) == gaussian_weight(7 - k, 7, 10) for k in range(1, 7))
    norm_err = abs(sum(normalize_weights([gaussian_weight(t, 12, 10) for t in range(1, 21)])) - 1)
    peak = gaussian_weight(7, 7, 10)
    ok = worst <= 1e-10 and sym and norm_err <= 1e-12 and abs(peak - 0.126157) <= 1e-6
    detail = f"max relative gap {worst:.2e}; symmetric {sym}; normalization error {norm_err:.1e}; peak {peak:.7f}"
    assert report(4, ok, detail, time.perf_counter() - t0, 10)


def test_5_harmonic_mean(report):
    t0 = time.perf_counter()
    a, b = harmonic_mean([83.9, 33.5, 64.5]), harmonic_mean([81.5, 46.6])
    ok = abs(a - 52.4) <= 0.05 and abs(b - 59.3) <= 0.05
    assert report(5, ok, f"three-way {a:.4f} (52.4), two-way {b:.4f} (59.3)", time.perf_counter() - t0, 1)


@pytest.fixture(scope="module")
def debias_runs():
    """Plain and meta runs at the default schedule, one pair per seed."""
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        spec = dict(DEBIAS_SPEC, seed=seed)
        ds = generate_dataset(DatasetSpec(**spec))
        res = {}
        for method in ("plain", "meta"):
            cfg = TrainConfig(dataset_spec=spec, method=method, model_seed=seed, sampler_seed=seed,
                              eval_splits=[], save_checkpoints=False)
            res[method] = train(cfg, ds)
        clf, novel = res["meta"].classifier, ds.novel_classes

        def top1(theta, split):
            return evaluate(theta, clf, ds.splits[split], novel).top1

        rows.append(dict(
            plain_ooc=top1(res["plain"].theta, "test_novel_ooc"),
            meta_ooc=top1(res["meta"].theta, "test_novel_ooc"),
            final_ic=top1(res["meta"].theta, "test_novel_ic"),
            gwa_ic=top1(res["meta"].gwa_theta, "test_novel_ic"),
        ))
    return rows, time.perf_counter() - t0


def test_6_debiasing_trend(report, debias_runs):
    rows, elapsed = debias_runs
    gaps = np.array([r["meta_ooc"] - r["plain_ooc"] for r in rows])
    wins = int((gaps > 0).sum())
    ok = wins >= 8 and gaps.mean() > 0
    detail = (f"meta wins {wins}/10 (need 8), mean gap {gaps.mean():+.4f}; "
              f"plain {np.mean([r['plain_ooc'] for r in rows]):.4f} meta {np.mean([r['meta_ooc'] for r in rows]):.4f}")
    assert report(6, ok, detail, elapsed, 300)


def test_7_gwa_trend(report, debias_runs):
    rows, elapsed = debias_runs
    hits = sum(r["gwa_ic"] >= r["final_ic"] for r in rows)
    detail = (f"GWA >= final in {hits}/10 seeds (need 7); mean GWA {np.mean([r['gwa_ic'] for r in rows]):.4f} "
              f"final {np.mean([r['final_ic'] for r in rows]):.4f}")
    assert report(7, hits >= 7, detail, elapsed, 300)


def test_8_bias_calibration(report):
    t0 = time.perf_counter()
    ds = generate_dataset(DatasetSpec(**DEBIAS_SPEC))
    rho, n_ctx = ds.spec.bias_rho, ds.spec.n_contexts

    def acc(split, classes):
        b = ds.splits[split]
        return float(np.mean(static_oracle_predict(ds, b.inputs, classes) == b.labels))

    train_acc = acc("train_base", ds.base_classes)
    ooc = {s: acc(s, c) for s, c in (("test_base_ooc", ds.base_classes), ("test_novel_ooc", ds.novel_classes))}
    ok = train_acc >= rho - 0.05 and all(v <= 1 / n_ctx + 0.05 for v in ooc.values())
    detail = (f"train {train_acc:.4f} (>= {rho - 0.05:.2f}); out-of-context "
              + ", ".join(f"{k} {v:.4f}" for k, v in ooc.items()) + f" (<= {1 / n_ctx + 0.05:.2f})")
    assert report(8, ok, detail, time.perf_counter() - t0, 30)


def _files(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_9_reproducibility(report, tmp_path):
    t0 = time.perf_counter()
    cfg = dict(dataset_spec=dict(DEBIAS_SPEC, seed=3), model_seed=3, sampler_seed=3)
    train(TrainConfig(**cfg), out_dir=tmp_path / "a")
    train(TrainConfig(**cfg), out_dir=tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    n_ckpt = sum(k.endswith(".omd1") for k in a)
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a) and "metrics.csv" in a
    detail = f"metrics.csv and {n_ckpt} checkpoints byte-identical: {same}"
    assert report(9, same, detail, time.perf_counter() - t0, 120)
