"""Acceptance criteria 1-9, each at its stated tolerance. One PASS/FAIL line per criterion."""

import json
import math
import time

import mpmath
import numpy as np
import pytest

from kronmix.cli import main
from kronmix.data import SynthSpec, normalized_bank, synth, window
from kronmix.evaluation import bucket_average, eval_nll, label_agreement, metrics, schedule_correlation, weight_trajectory
from kronmix.linalg import CholFactor, materialize
from kronmix.matnorm import MatnormComponent, sample
from kronmix.mixloss import LossConfig, MixtureBank, bank_to_arrays, batch_log_joint, batch_nll, grad, nll
from kronmix.model import ModelConfig, ModelParams
from kronmix.trainer import TrainConfig, train

from conftest import CONFIGS, dense_covariance, dense_mixture_nll, load_config, random_bank
from fd import BANK_KEYS, directional_check, loss_fd_gradients


def test_1_oracle_equivalence(criterion_report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, q, k = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 4)
        bank = random_bank(rng, n, q, k)
        logits, r = rng.standard_normal(k), rng.standard_normal((n, q))
        oracle = dense_mixture_nll(bank, logits, r)
        worst = max(worst, abs(nll(bank, logits, r) - oracle) / abs(oracle))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10.0
    criterion_report(1, "oracle equivalence", ok, f"max rel err {worst:.2e} (<= 1e-8), {elapsed:.2f} s (< 10 s)")
    assert ok


def test_2_gradient_correctness(criterion_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    bank = random_bank(rng, 3, 2, 2)
    y, m, logits = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    cfg = LossConfig(rho=0.3)
    g = grad(y, m, bank, logits, cfg)
    num = loss_fd_gradients(y, m, bank, logits, cfg)
    worst = 0.0
    for key in ("mean", "logits", *BANK_KEYS):
        a, b = getattr(g, key), num[key]
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-4))))

    tiny = ModelConfig(n=3, p=4, q=2, k=2, hidden_width=8, hidden_depth=1, head_width=8, head_depth=1)
    params = ModelParams.init(tiny, seed=11)
    arrays = bank_to_arrays(random_bank(rng, 3, 2, 2, scale=0.3))
    x, yb = rng.standard_normal((8, 3, 4)), rng.standard_normal((8, 3, 2))
    fd_slope, analytic = directional_check(params, arrays, x, yb, LossConfig(rho=0.5), rng)
    dir_err = abs(fd_slope - analytic) / abs(analytic)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and dir_err <= 1e-4 and elapsed < 30.0
    criterion_report(2, "gradient correctness", ok,
                     f"max entry rel err {worst:.2e}, directional rel err {dir_err:.2e} (<= 1e-4), {elapsed:.2f} s")
    assert ok


def _mp_log_joint(comp, log_w, r):
    """Log-joint from the factor entries in 50-digit arithmetic."""
    n, q = comp.shape
    ln = mpmath.matrix(materialize(comp.spatial).tolist())
    lq = mpmath.matrix(materialize(comp.temporal).tolist())
    z = ln.T * mpmath.matrix(np.asarray(r).tolist()) * lq
    quad = sum(z[i, j] ** 2 for i in range(n) for j in range(q))
    logdet = n * sum(mpmath.mpf(float(v)) for v in comp.temporal.log_diag) + \
        q * sum(mpmath.mpf(float(v)) for v in comp.spatial.log_diag)
    return mpmath.mpf(float(log_w)) - mpmath.mpf(n * q) / 2 * mpmath.log(2 * mpmath.pi) + logdet - quad / 2


def test_3_numerical_stability(criterion_report):
    mpmath.mp.dps = 50
    rng = np.random.default_rng(3)
    cases = []
    # very negative log-joints: huge residual
    bank = random_bank(rng, 2, 2, 2, scale=0.2)
    cases.append((bank, np.array([0.2, -0.4]), 90.0 * rng.standard_normal((2, 2))))
    # very positive log-joints: tight precision, zero residual
    tight = MixtureBank(tuple(
        MatnormComponent(CholFactor(4, np.zeros(6), np.full(4, 300.0 + d)), CholFactor(4, np.zeros(6), np.full(4, 300.0)))
        for d in (0.0, 0.001)))
    cases.append((tight, np.array([0.0, 0.0]), np.zeros((4, 4))))
    worst, magnitudes, finite = 0.0, [], True
    for bank, logits, r in cases:
        lw = logits - np.log(np.sum(np.exp(logits)))
        z_mp = [_mp_log_joint(c, w, r) for c, w in zip(bank.components, lw)]
        oracle = -(max(z_mp) + mpmath.log(sum(mpmath.exp(z - max(z_mp)) for z in z_mp)))
        got = nll(bank, logits, r)
        finite &= math.isfinite(got)
        magnitudes.append(float(max(abs(z) for z in z_mp)))
        worst = max(worst, abs(got - float(oracle)) / abs(float(oracle)))
    ok = finite and worst <= 1e-10 and min(magnitudes) >= 5e3
    criterion_report(3, "numerical stability", ok,
                     f"|z| up to {max(magnitudes):.3g}, rel err {worst:.2e} (<= 1e-10)")
    assert ok


def test_4_scale_invariance(criterion_report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        n, q, k = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 4)
        bank = random_bank(rng, n, q, k)
        y, m, logits = rng.standard_normal((n, q)), rng.standard_normal((n, q)), rng.standard_normal(k)
        cfg = LossConfig(rho=0.5)
        base_nll, base_g = nll(bank, logits, y - m), grad(y, m, bank, logits, cfg).mean
        for nu in (0.1, 7.3):
            scaled = bank.rescaled([nu] * k)
            worst = max(worst, abs(nll(scaled, logits, y - m) - base_nll) / abs(base_nll))
            g = grad(y, m, scaled, logits, cfg).mean
            worst = max(worst, float(np.max(np.abs(g - base_g)) / np.max(np.abs(base_g))))
    ok = worst <= 1e-10
    criterion_report(4, "scale invariance", ok, f"max rel err {worst:.2e} (<= 1e-10), nu in {{0.1, 7.3}}")
    assert ok


def test_5_sampler_fidelity(criterion_report):
    t0 = time.perf_counter()
    comp = MatnormComponent(CholFactor(2, [0.6], [0.2, -0.3]), CholFactor(2, [-0.4], [0.1, 0.5]))
    draws = sample(comp, np.random.default_rng(5), size=200_000)
    vecs = draws.transpose(0, 2, 1).reshape(len(draws), -1)
    emp = vecs.T @ vecs / len(vecs)
    target = dense_covariance(comp)
    err = np.linalg.norm(emp - target) / np.linalg.norm(target)
    elapsed = time.perf_counter() - t0
    ok = err <= 0.05 and elapsed < 60.0
    criterion_report(5, "sampler fidelity", ok, f"Frobenius rel err {err:.4f} (<= 0.05), {elapsed:.2f} s (< 60 s)")
    assert ok


@pytest.fixture(scope="module")
def recovery():
    t0 = time.perf_counter()
    spec = SynthSpec.from_dict(load_config("recovery_synth.json"))
    res = synth(spec)
    base_cfg = load_config("recovery_train.json")
    cfg = TrainConfig.from_dict(base_cfg)
    tr, va, te = window(res.table, cfg.p, cfg.q, cfg.splits, stride=cfg.stride, offset=cfg.offset)
    signal = np.stack([te.norm.normalize(res.signal[s + cfg.p: s + cfg.p + cfg.q].T) for s in te.starts])
    true_nll = float(np.mean(batch_nll(normalized_bank(spec.true_bank, te.norm),
                                       np.log(spec.schedule_weights(te.time_of_day)), te.y - signal)))
    full = train(tr, va, cfg)
    iso = train(tr, va, TrainConfig.from_dict({**base_cfg, "K": 1, "freeze_factors": True}))
    diag = train(tr, va, TrainConfig.from_dict({**base_cfg, "diagonal_only": True}))
    return {"spec": spec, "res": res, "test": te, "true_nll": true_nll, "full": full, "iso": iso, "diag": diag,
            "dims": te.n * te.q, "t0": t0}


def test_6_synthetic_recovery(recovery, criterion_report):
    te, spec, ckpt = recovery["test"], recovery["spec"], recovery["full"].checkpoint
    gap = (eval_nll(ckpt, te) - recovery["true_nll"]) / recovery["dims"]

    records = weight_trajectory(ckpt, te)
    tod = np.array([t for t, _ in records])
    weights = np.array([w for _, w in records])
    starts, avg = bucket_average(tod, weights, n_buckets=24)
    pearson, perm = schedule_correlation(avg, spec.schedule_weights(starts + 30.0))

    labels = dict(recovery["res"].labels)
    true_labels = np.array([labels[s] for s in te.starts])
    out = ckpt.predict(te)
    z = batch_log_joint(ckpt.bank, out.logits, te.y - out.mean)
    acc, _ = label_agreement(z.argmax(axis=1), true_labels, ckpt.bank.K)

    elapsed = time.perf_counter() - recovery["t0"]
    ok = gap <= 0.05 and pearson >= 0.8 and acc >= 0.8 and elapsed < 300.0
    criterion_report(6, "synthetic recovery", ok,
                     f"NLL gap {gap:.4f} nats/dim (<= 0.05), Pearson r {pearson:.3f} (>= 0.8), "
                     f"label accuracy {acc:.3f} (>= 0.8), {elapsed:.1f} s incl. baselines (< 300 s)")
    assert ok


def test_7_improvement_over_baselines(recovery, criterion_report):
    te, dims = recovery["test"], recovery["dims"]
    full = eval_nll(recovery["full"].checkpoint, te) / dims
    iso = eval_nll(recovery["iso"].checkpoint, te) / dims
    diag = eval_nll(recovery["diag"].checkpoint, te) / dims
    for c in recovery["iso"].checkpoint.bank.components:
        assert np.all(c.spatial.log_diag == 0) and np.all(c.temporal.strict_lower == 0)
    ok = iso - full >= 0.01 and diag - full >= 0.01
    criterion_report(7, "improvement over baselines", ok,
                     f"nats/dim: full {full:.4f}, isotropic {iso:.4f} (margin {iso - full:.4f}), "
                     f"diagonal {diag:.4f} (margin {diag - full:.4f}) (>= 0.01)")
    assert ok


def test_8_metric_unit_cases(criterion_report):
    checks = []
    truth = np.random.default_rng(8).uniform(20, 70, size=(4, 3, 12))
    zero = metrics(truth, truth.copy())
    checks.append(zero.rmse == [0.0] * 4 and zero.mae == [0.0] * 4 and zero.mape == [0.0] * 4)
    one = metrics([[[45.0]]], [[[50.0]]], horizons=[1])
    checks.append(one.mae == [5.0] and one.rmse == [5.0] and one.mape == [10.0])
    two = metrics([[[53.0]], [[46.0]]], [[[50.0]], [[50.0]]], horizons=[1])
    checks.append(two.rmse == [math.sqrt(12.5)] and two.mae == [3.5])
    rng = np.random.default_rng(9)
    jensen = True
    for _ in range(100):
        w, n, q = rng.integers(1, 8), rng.integers(1, 6), rng.integers(1, 13)
        t = rng.uniform(1, 80, size=(w, n, q))
        rep = metrics(t + rng.standard_cauchy(size=t.shape), t)
        jensen &= all(r >= a for r, a in zip(rep.rmse, rep.mae))
    ok = all(checks) and jensen
    criterion_report(8, "metric unit tests", ok, f"hand cases {sum(checks)}/3 exact, RMSE >= MAE on 100 reports: {jensen}")
    assert ok


def test_9_determinism(tmp_path, criterion_report):
    assert main(["synth", str(CONFIGS / "smoke_synth.json"), str(tmp_path / "data")]) == 0
    cfg = {**load_config("smoke_train.json"), "epochs": 6, "rho": 0.05, "seed": 13}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    for run in ("a", "b"):
        assert main(["train", str(tmp_path / "data" / "series.csv"), str(tmp_path / "cfg.json"), str(tmp_path / run),
                     "--deterministic", "--seed", "13"]) == 0
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("history.csv", "checkpoint.json")]
    ok = all(same)
    criterion_report(9, "determinism", ok, f"history.csv identical: {same[0]}, checkpoint.json identical: {same[1]}")
    assert ok
