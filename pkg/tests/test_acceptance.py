"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines.
"""
import itertools
import shutil
import time

import numpy as np
import pytest

import vcal.cli as cli
from vcal.bench import (
    BOREHOLE_THETA_TRUE,
    BoreholeProblem,
    Illustrative1DProblem,
    analytic_theta_posterior,
    borehole_eta,
    default_theta_grid,
    illustrative_model,
    lhs,
    make_borehole_dataset,
    mse_metric,
    sample_illustrative,
)
from vcal.grad import elbo_value_grad, finite_diff_check, ParamVector, pack
from vcal.model import CalibrationDataset, NoiseParams, build_model, emulator_eval, standardize_outputs, warp_derivative
from vcal.rff import KernelParams, build_layer, feature_map
from vcal.svi import (
    draw_eps,
    elbo,
    make_priors,
    minibatch_loglik,
    posterior_samples,
    unflatten_weights,
)
from vcal.trainer import calibrate, default_schedule

from conftest import toy_dataset, toy_model
from test_svi import random_posterior, random_sample, tiny_enumerable


REPORT_LINES = []


def report(number, name, passed, detail):
    line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {name} ({detail})"
    REPORT_LINES.append(line)
    print("\n" + line)
    return passed


def _max_kernel_error(n_rf, rng_pairs):
    kernel = KernelParams.isotropic(1.0, 1.0, 2)
    emp = np.zeros(len(rng_pairs))
    for seed in range(20):
        layer = build_layer(2, n_rf, kernel, seed)
        a, _ = feature_map(layer, rng_pairs[:, 0])
        b, _ = feature_map(layer, rng_pairs[:, 1])
        emp += np.sum(a * b, axis=1)
    emp /= 20
    exact = np.array([kernel.exact(p, q) for p, q in rng_pairs])
    return float(np.max(np.abs(emp - exact)))


def test_1_kernel_fidelity():
    t0 = time.perf_counter()
    pairs = np.random.default_rng(2024).uniform(-2, 2, size=(20, 2, 2))
    e100, e1000 = _max_kernel_error(100, pairs), _max_kernel_error(1000, pairs)
    ok = e100 < 0.15 and e1000 < 0.05
    assert report(1, "kernel fidelity", ok, f"max err {e100:.4f} @100, {e1000:.4f} @1000, {time.perf_counter() - t0:.1f}s")


def test_2_gradient_exactness():
    model = toy_model(n_rf=4)
    ds = toy_dataset(seed=1, n=3, N=3)
    priors = make_priors(model, 0.0, 1.0)
    eps = draw_eps(model, 2, np.random.default_rng(7))
    layout = pack(model, priors).layout
    idx = np.arange(3)

    def f(v):
        r = elbo_value_grad(model, ds, ParamVector(np.asarray(v), layout), priors, 2, idx, idx, eps)
        return r.value, r.grad

    worst = 0.0
    rng = np.random.default_rng(5)
    base = pack(model, priors)
    for _ in range(5):
        params = base.with_values(base.values + 0.3 * rng.standard_normal(len(base)))
        worst = max(worst, float(finite_diff_check(f, params, 1e-5).max()))
    assert report(2, "gradient vs central differences", worst < 1e-4, f"max rel err {worst:.2e}")


def test_3_minibatch_unbiasedness():
    model = toy_model()
    ds = toy_dataset(seed=2, n=4, N=4)
    s = random_sample(model, 3)
    full = minibatch_loglik(model, ds, s, np.arange(4), np.arange(4))
    subsets = list(itertools.combinations(range(4), 2))
    assert len(subsets) == 6
    avg = np.mean([minibatch_loglik(model, ds, s, list(c), np.arange(4)) for c in subsets])
    diff = abs(avg - full)
    assert report(3, "minibatch average over 6 subsets", diff <= 1e-12, f"|diff| {diff:.2e}")


def test_4_illustrative_recovery():
    t0 = time.perf_counter()
    problem = Illustrative1DProblem()
    zs = []
    for seed in range(10):
        draw = sample_illustrative(problem, seed)
        model = illustrative_model(problem, n_rf=50, seed=seed)
        priors = make_priors(model, 0.0, 1.0)
        grid = analytic_theta_posterior(model, draw.dataset, default_theta_grid(priors), priors)
        sched = default_schedule(model, learning_rate=0.01, iterations=2000, n_mc=8, train_hyperparameters=False)
        q = calibrate(model, draw.dataset, sched, seed=seed, priors=priors).posterior.q_theta
        zs.append(float((q.mean[0] - grid.mean()[0]) / grid.std()[0]))
    hits = sum(abs(z) < 0.5 for z in zs)
    detail = f"{hits}/10 seeds within 0.5 sd, z={np.round(zs, 2).tolist()}, {time.perf_counter() - t0:.0f}s"
    assert report(4, "illustrative posterior recovery", hits >= 8, detail)


# desk-scale borehole settings; see the README for how they were chosen
BH_N_RF = 300
BH_ITERATIONS = 3000


@pytest.fixture(scope="module")
def borehole_run():
    t0 = time.perf_counter()
    raw = make_borehole_dataset(BoreholeProblem())
    ds, _, _ = standardize_outputs(raw)
    model = build_model(
        5, 3, 1, n_rf=BH_N_RF, discrepancy="additive",
        emulator_kernels=[KernelParams.isotropic(1.0, 20.0, 8)], disc_kernel=KernelParams.isotropic(0.1, 20.0, 5),
        noise=NoiseParams(1e-2, 1e-3), seed=0,
    )
    priors = make_priors(model, 0.5, 0.25)
    sched = default_schedule(model, learning_rate=0.01, iterations=BH_ITERATIONS)
    res = calibrate(model, ds, sched, seed=0, priors=priors)
    theta_q = np.clip(posterior_samples(res.posterior, 500, 1), 0.0, 1.0)
    mse_q = mse_metric(borehole_eta, raw.X, raw.Y, theta_q)
    mse_u = mse_metric(borehole_eta, raw.X, raw.Y, np.random.default_rng(2).random((500, 3)))
    elapsed = time.perf_counter() - t0
    report("5", "borehole runtime < 30 min", elapsed < 1800, f"{elapsed:.0f}s")
    return res.posterior.q_theta.mean, mse_q, mse_u, elapsed


def test_5a_borehole_theta_accuracy(borehole_run):
    mean = borehole_run[0]
    err = np.abs(mean - np.array(BOREHOLE_THETA_TRUE))
    ok = bool(np.all(err < 0.1))
    report("5a", "borehole theta within 0.1", ok, f"mean {np.round(mean, 3).tolist()}, abs err {np.round(err, 3).tolist()}")
    assert ok, f"posterior mean {mean} misses theta_true by {err}"


def test_5b_borehole_mse_improvement(borehole_run):
    _, mse_q, mse_u, elapsed = borehole_run
    ok = mse_u / mse_q >= 3
    report("5b", "borehole mse improvement >= 3x", ok, f"mse q {mse_q:.3g} vs uniform {mse_u:.4g}, ratio {mse_u / mse_q:.1f}")
    assert ok and elapsed < 1800


def test_6_general_warp_derivative():
    t0 = time.perf_counter()
    eta = lambda x, t: np.sin(3 * x) + t * x
    X = np.linspace(0, 1, 30)[:, None]
    Y = eta(X, 0.6) + 0.2 * np.cos(2 * X)
    XT = lhs(80, 2, 0)
    ds = CalibrationDataset(X, Y, XT[:, :1], XT[:, 1:], eta(XT[:, :1], XT[:, 1:]))
    model = build_model(
        1, 1, 1, n_rf=50, discrepancy="general", emulator_kernels=[KernelParams.isotropic(1.0, 5.0, 2)],
        disc_kernel=KernelParams.isotropic(0.2, 2.0, 2), noise=NoiseParams(0.02, 0.02), seed=0,
    )
    priors = make_priors(model, 0.5, 0.25)
    sched = default_schedule(model, learning_rate=0.01, iterations=1500, minibatch_field=30, minibatch_sim=80,
                             n_mc=4, train_hyperparameters=False)
    res = calibrate(model, ds, sched, seed=0, priors=priors)
    theta, W = posterior_samples(res.posterior, 500, 0, with_weights=True)
    W_eta, W_g = unflatten_weights(res.model, W)
    avg = []
    for x in (0.2, 0.5, 0.8):
        d = [warp_derivative(res.model, W_g[s], [x], emulator_eval(res.model, [W_eta[s]], [x], theta[s]))[0, 0]
             for s in range(500)]
        avg.append(float(np.mean(d)))
    ok = all(0.7 <= a <= 1.3 for a in avg)
    assert report(6, "general warp derivative near one", ok, f"means {np.round(avg, 3).tolist()}, {time.perf_counter() - t0:.0f}s")


def test_7_elbo_lower_bound():
    model, ds = tiny_enumerable(1)
    priors = make_priors(model, 0.0, 1.0)
    grid = analytic_theta_posterior(model, ds, np.linspace(-8, 8, 4001), priors)
    eps = draw_eps(model, 20_000, np.random.default_rng(0))
    gaps = [
        grid.log_marginal - elbo(model, ds, random_posterior(model, s), priors, 20_000, np.arange(2), np.arange(2), eps).value
        for s in range(20)
    ]
    ok = min(gaps) >= -1e-3
    assert report(7, "elbo below log marginal", ok, f"min gap {min(gaps):.4g} over 20 settings")


def test_8_determinism_and_resume(tmp_path, monkeypatch):
    data = tmp_path / "data"
    assert cli.main(["generate", "--problem", "illustrative", "--seed", "3", "--out", str(data)]) == 0
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        'preset = "appendix_default"\n[model]\nd1 = 1\nd2 = 1\nn_rf = 10\n'
        '[prior]\ntheta_mean = 0.0\ntheta_var = 1.0\nsigma_y = 0.2\nsigma_z = 0.2\nprecision_eta = 0.5\n'
        f'[training]\nseed = 9\niterations = 25\ncheckpoint_every = 40\nminibatch_field = 2\nminibatch_sim = 3\n'
        f'[io]\ndataset = "{data}"\nout = "{tmp_path / "run"}"\n'
    )
    out = tmp_path / "run"
    real, first = cli.save_checkpoint, []

    def spy(path, state, *a, **k):
        real(path, state, *a, **k)
        if not first:
            shutil.copy(path, tmp_path / "mid.json")
            first.append(state.iteration)

    monkeypatch.setattr(cli, "save_checkpoint", spy)
    assert cli.main(["calibrate", "--config", str(cfg)]) == 0
    run1 = (out / "posterior_samples.csv").read_bytes()
    state1, _ = cli.load_checkpoint(out / "checkpoint.json")
    assert cli.main(["calibrate", "--config", str(cfg)]) == 0
    same_seed = (out / "posterior_samples.csv").read_bytes() == run1
    assert cli.main(["calibrate", "--config", str(cfg), "--resume", str(tmp_path / "mid.json")]) == 0
    state3, _ = cli.load_checkpoint(out / "checkpoint.json")
    resumed = (
        (out / "posterior_samples.csv").read_bytes() == run1
        and state3.params.values.tobytes() == state1.params.values.tobytes()
    )
    ok = same_seed and resumed and first == [40]
    assert report(8, "determinism and resume", ok, f"same-seed identical {same_seed}, resume from {first} identical {resumed}")
