import math
from dataclasses import replace

import numpy as np
import pytest

from vcal.bench import (
    BOREHOLE_THETA_TRUE,
    BoreholeProblem,
    GridPosterior,
    Illustrative1DProblem,
    analytic_theta_posterior,
    borehole_delta,
    borehole_eta,
    borehole_flow,
    borehole_physical,
    default_theta_grid,
    illustrative_model,
    lhs,
    make_borehole_dataset,
    make_illustrative_dataset,
    mse_metric,
    sample_illustrative,
    theta_log_lik,
    theta_log_lik_dense,
    tv_distance,
)
from vcal.errors import DomainError, ModeError, ValidationError
from vcal.model import CalibrationDataset
from vcal.rff import RandomFeatureLayer
from vcal.svi import make_priors

from conftest import toy_model

# 40-digit evaluation of the formula at the cube centre (mpmath)
BOREHOLE_CENTRE = 70.87291263681895709075


def test_borehole_centre_value():
    assert borehole_eta(np.full(5, 0.5), np.full(3, 0.5)) == pytest.approx(BOREHOLE_CENTRE, rel=1e-14)


def test_borehole_dual_implementation():
    rng = np.random.default_rng(0)
    x, t = rng.random((1000, 5)), rng.random((1000, 3))
    a = borehole_eta(x, t)
    b = borehole_flow(**borehole_physical(x, t))
    assert np.max(np.abs(a - b) / np.abs(a)) <= 1e-12
    assert np.all(a > 0)


def test_borehole_monotone_in_upper_head():
    x = np.full(5, 0.5)
    hi = x.copy()
    hi[1] = 0.8
    assert borehole_eta(hi, np.full(3, 0.5)) > borehole_eta(x, np.full(3, 0.5))


def test_borehole_domain():
    with pytest.raises(DomainError):
        borehole_eta(np.full(5, 1.2), np.full(3, 0.5))
    with pytest.raises(DomainError):
        borehole_delta([-0.1, 0.5, 0, 0, 0])


def test_borehole_delta_values():
    assert borehole_delta([0, 0, 0.3, 0.3, 0.3]) == 0.0
    assert borehole_delta([1, 1, 0, 0, 0]) == pytest.approx(28 / 60, rel=1e-15)
    assert borehole_delta([1, 0, 0, 0, 0]) == pytest.approx(2.0, rel=1e-15)


def test_lhs_stratified_and_reproducible():
    a = lhs(50, 3, 4)
    assert a.shape == (50, 3)
    k = np.arange(50)
    for col in np.sort(a, axis=0).T:
        assert np.all((col >= k / 50) & (col < (k + 1) / 50))
    assert np.array_equal(a, lhs(50, 3, 4))
    one = lhs(1, 2, 0)
    assert one.shape == (1, 2) and np.all((one >= 0) & (one < 1))


def test_borehole_dataset():
    p = BoreholeProblem(n=1000, N=50, seed=2)
    ds = make_borehole_dataset(p)
    assert (ds.n, ds.N, ds.d1, ds.d2) == (1000, 50, 5, 3)
    assert np.all(ds.Z > 0)
    resid = ds.Y[:, 0] - borehole_eta(ds.X, np.array(p.theta_true)) - borehole_delta(ds.X)
    assert (2e-3) ** 2 <= np.var(resid, ddof=1) <= (8e-3) ** 2
    clean = make_borehole_dataset(replace(p, noise_std=0.0))
    assert np.allclose(clean.Y[:, 0] - borehole_eta(clean.X, np.array(p.theta_true)), borehole_delta(clean.X), rtol=0, atol=1e-12)
    assert np.array_equal(make_borehole_dataset(p).Y, ds.Y)


def test_borehole_weak_sensitivity_to_r_and_lower_transmissivity():
    # shifting theta_2 or theta_3 by 0.1 moves the flow by less than the observation noise,
    # while the same shift in theta_1 moves it by several units
    X = lhs(2000, 5, 0)
    t = np.array(BOREHOLE_THETA_TRUE)
    base = borehole_eta(X, t)
    rms = []
    for i in range(3):
        shifted = t.copy()
        shifted[i] += 0.1
        rms.append(np.sqrt(np.mean((borehole_eta(X, shifted) - base) ** 2)))
    assert rms[0] > 1.0
    assert rms[1] < 5e-3 and rms[2] < 5e-3


def test_borehole_problem_validation():
    assert BoreholeProblem().theta_true == BOREHOLE_THETA_TRUE
    with pytest.raises(ValidationError):
        BoreholeProblem(theta_true=(0.5, 1.5, 0.5))
    with pytest.raises(ValidationError):
        BoreholeProblem(n=0)


def test_illustrative_dataset():
    ds, theta = make_illustrative_dataset(Illustrative1DProblem(), 3)
    assert ds.X.shape == (4, 1) and ds.Z.shape == (7, 1) and ds.T.shape == (7, 1)
    ds2, theta2 = make_illustrative_dataset(Illustrative1DProblem(), 3)
    assert theta == theta2 and np.array_equal(ds.Y, ds2.Y)
    p = Illustrative1DProblem()
    assert (p.sigma_eta, p.A_eta, p.sigma_delta, p.A_delta, p.N, p.n) == (1.0, 0.5, 0.2, 1 / 20, 7, 4)


def test_illustrative_zero_discrepancy_lies_on_eta():
    draw = sample_illustrative(Illustrative1DProblem(sigma_delta=0.0, obs_noise=0.0), 1)
    assert np.array_equal(draw.dataset.Y[:, 0], draw.eta_field)
    assert np.all(draw.delta_field == 0)


def oracle_setup(seed=0):
    p = Illustrative1DProblem()
    draw = sample_illustrative(p, seed)
    model = illustrative_model(p, n_rf=20, seed=seed)
    return model, draw.dataset, make_priors(model, 0.0, 1.0)


def test_theta_log_lik_matches_dense():
    model, ds, _ = oracle_setup(2)
    for th in np.linspace(-2, 2, 7):
        a, b = theta_log_lik(model, ds, [th]), theta_log_lik_dense(model, ds, [th])
        assert a == pytest.approx(b, rel=1e-8)


def test_grid_normalisation_and_moments():
    model, ds, priors = oracle_setup(1)
    grid = analytic_theta_posterior(model, ds, default_theta_grid(priors), priors)
    assert len(grid.axes[0]) == 401 and grid.axes[0][0] == -4.0 and grid.axes[0][-1] == 4.0
    assert np.all(grid.density >= 0)
    assert abs(grid.density.sum() * grid.cell_volume - 1.0) < 1e-10
    assert grid.std()[0] > 0


def test_flat_likelihood_gives_prior():
    model, ds, priors = oracle_setup(0)
    layer = model.emulator_layers[0]
    flat = RandomFeatureLayer(layer.n_rf, 2, np.hstack([layer.base_freqs[:, :1], np.zeros((layer.n_rf // 2, 1))]), layer.kernel)
    model = replace(model, emulator_layers=(flat,))
    sim_only = CalibrationDataset(ds.X[:1], ds.Y[:1], ds.Xstar, ds.T, ds.Z)
    # no theta information anywhere once the field block is tiny and the emulator ignores theta
    grid = analytic_theta_posterior(model, sim_only, np.linspace(-4, 4, 201), priors)
    ax = grid.axes[0]
    prior = np.exp(-0.5 * ax**2) / math.sqrt(2 * math.pi)
    prior /= prior.sum() * grid.cell_volume
    assert np.allclose(grid.density, prior, rtol=1e-9)


def test_oracle_guards():
    model, ds, priors = oracle_setup(0)
    with pytest.raises(ValidationError):
        analytic_theta_posterior(model, ds, np.linspace(-1, 1, 10_001), priors)
    with pytest.raises(ValidationError):
        analytic_theta_posterior(model, ds, np.array([0.0, 0.1, 0.3]), priors)
    with pytest.raises(ModeError):
        analytic_theta_posterior(toy_model("general"), ds, np.linspace(-1, 1, 5), priors)
    big = CalibrationDataset(np.zeros((200, 1)), np.zeros((200, 1)), np.zeros((100, 1)), np.zeros((100, 1)), np.zeros((100, 1)))
    with pytest.raises(ValidationError):
        analytic_theta_posterior(model, big, np.linspace(-1, 1, 5), priors)


def test_two_dimensional_grid():
    model = toy_model(d2=2, n_rf=6)
    rng = np.random.default_rng(0)
    ds = CalibrationDataset(rng.random((3, 1)), rng.standard_normal((3, 1)), rng.random((4, 1)), rng.random((4, 2)), rng.standard_normal((4, 1)))
    priors = make_priors(model, 0.0, 1.0)
    grid = analytic_theta_posterior(model, ds, default_theta_grid(priors, 41), priors)
    assert grid.density.shape == (41, 41)
    assert abs(grid.density.sum() * grid.cell_volume - 1.0) < 1e-10


def test_mse_metric_examples():
    X = np.random.default_rng(0).random((10, 5))
    th = np.array(BOREHOLE_THETA_TRUE)
    Y = borehole_eta(X, th)
    assert mse_metric(borehole_eta, X, Y, th[None]) == 0.0
    eta = lambda X, t: X[:, 0] * t[0]
    Xs, Ys = np.array([[1.0], [2.0]]), np.array([1.0, 1.0])
    assert mse_metric(eta, Xs, Ys, [[1.0]]) == pytest.approx((0 + 1) / 2)
    assert mse_metric(eta, Xs, Ys, [[1.0], [0.0]]) == pytest.approx(((0 + 1) / 2 + (1 + 1) / 2) / 2)


def _grid_draws(grid, size, seed):
    p = grid.density.ravel() * grid.cell_volume
    return np.random.default_rng(seed).choice(grid.axes[0], size=size, p=p / p.sum())


def _expected_tv(grid, size):
    # E|p_hat - p| ~ sqrt(2 p / (pi n)) per bin for multinomial counts
    p = grid.density.ravel() * grid.cell_volume
    return 0.5 * float(np.sum(np.sqrt(2 * p / (math.pi * size))))


def test_tv_distance_self_comparison_concentrated():
    from vcal.model import NoiseParams

    p = Illustrative1DProblem()
    draw = sample_illustrative(p, 0)
    model = illustrative_model(p, n_rf=20, seed=0, noise=NoiseParams(0.05, 0.05))
    priors = make_priors(model, 0.0, 1.0)
    grid = analytic_theta_posterior(model, draw.dataset, default_theta_grid(priors), priors)
    for r in range(5):
        assert tv_distance(_grid_draws(grid, 5000, r), grid) < 0.05


def test_tv_distance_self_comparison_tracks_sampling_noise():
    model, ds, priors = oracle_setup(4)
    grid = analytic_theta_posterior(model, ds, default_theta_grid(priors), priors)
    tv = np.mean([tv_distance(_grid_draws(grid, 5000, r), grid) for r in range(5)])
    assert 0.7 * _expected_tv(grid, 5000) < tv < 1.3 * _expected_tv(grid, 5000)
    shifted = _grid_draws(grid, 5000, 0) + 5 * grid.std()[0]
    assert tv_distance(shifted, grid) > 0.9


def test_tv_distance_exact_for_grid_mass():
    axes = (np.array([0.0, 1.0]),)
    grid = GridPosterior(axes, np.array([0.5, 0.5]), np.zeros(2), np.zeros(2), 0.0, 1.0)
    assert tv_distance([0.0, 1.0], grid) == 0.0
    assert tv_distance([0.0, 0.0], grid) == 0.5
