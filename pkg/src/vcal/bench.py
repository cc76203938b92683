"""Benchmark problems, data generators, a small-problem analytic oracle and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .errors import DomainError, ModeError, ValidationError
from .model import (
    Additive,
    CalibrationDataset,
    CalibrationModel,
    NoDiscrepancy,
    NoiseParams,
    build_model,
)
from .rff import KernelParams, feature_map
from .svi import VariationalPosterior

BOREHOLE_THETA_TRUE = (0.089, 0.308, 0.372)
BOREHOLE_NOISE_STD = 5e-3

# oracle size guards
MAX_ORACLE_ROWS = 256
MAX_ORACLE_GRID = 10_000


# --- borehole -----------------------------------------------------------------

def _unit(a, dim: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != dim:
        raise ValidationError(f"{what} must have {dim} columns, got {a.shape[-1]}")
    if np.any(a < 0.0) or np.any(a > 1.0) or not np.all(np.isfinite(a)):
        raise DomainError(f"{what} must lie in the unit cube [0, 1]^{dim}")
    return a


def borehole_eta(x, t):
    """Borehole water flow; x in [0,1]^5, t in [0,1]^3 (rows broadcast)."""
    x = _unit(x, 5, "x")
    t = _unit(t, 3, "t")
    Tu = x[..., 0] * (115600 - 63070) + 63070
    Hu = x[..., 1] * (1110 - 990) + 990
    Hl = x[..., 2] * (820 - 700) + 700
    L = x[..., 3] * (1680 - 1120) + 1120
    Kw = x[..., 4] * (12045 - 9855) + 9855
    rw = t[..., 0] * (0.15 - 0.05) + 0.05
    r = t[..., 1] * (50000 - 100) + 100
    Tl = t[..., 2] * (116 - 63.1) + 63.1
    log_ratio = np.log(r / rw)
    return 2 * np.pi * Tu * (Hu - Hl) / (log_ratio * (1 + 2 * L * Tu / (log_ratio * rw**2 * Kw) + Tu / Tl))


def borehole_physical(x, t) -> dict:
    """Map unit-cube inputs to the physical borehole variables."""
    x = _unit(x, 5, "x")
    t = _unit(t, 3, "t")
    batch = np.broadcast_shapes(x.shape[:-1], t.shape[:-1])
    u = np.concatenate([np.broadcast_to(x, batch + (5,)), np.broadcast_to(t, batch + (3,))], axis=-1)
    lo = np.array([63070, 990, 700, 1120, 9855, 0.05, 100, 63.1])
    hi = np.array([115600, 1110, 820, 1680, 12045, 0.15, 50000, 116])
    v = lo + u * (hi - lo)
    names = ("Tu", "Hu", "Hl", "L", "Kw", "rw", "r", "Tl")
    return {k: v[..., i] for i, k in enumerate(names)}


def borehole_flow(Tu, Hu, Hl, L, Kw, rw, r, Tl):
    """Borehole formula in physical units, written in the textbook arrangement."""
    lnr = np.log(r) - np.log(rw)
    num = 2.0 * math.pi * Tu * (Hu - Hl)
    den = lnr * (1.0 + (2.0 * L * Tu) / (lnr * rw * rw * Kw) + Tu / Tl)
    return num / den


def borehole_delta(x):
    """Rational discrepancy 2(10 x1^2 + 4 x2^2) / (50 x1 x2 + 10); only x1, x2 are used."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    if np.any((x1 < 0) | (x1 > 1) | (x2 < 0) | (x2 > 1)):
        raise DomainError("borehole_delta needs x1, x2 in [0, 1]")
    return 2.0 * (10.0 * x1**2 + 4.0 * x2**2) / (50.0 * x1 * x2 + 10.0)


def lhs(n: int, d: int, seed) -> np.ndarray:
    """Latin hypercube: in every column exactly one point per bin [k/n, (k+1)/n)."""
    if n < 1 or d < 1:
        raise ValidationError(f"lhs needs n, d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    out = np.empty((n, d))
    for j in range(d):
        out[:, j] = (rng.permutation(n) + rng.random(n)) / n
    # (k + u) / n can round up to (k+1)/n for u close to 1
    return np.minimum(out, np.nextafter((np.floor(out * n) + 1) / n, 0))


@dataclass(frozen=True)
class BoreholeProblem:
    theta_true: tuple = BOREHOLE_THETA_TRUE
    noise_std: float = BOREHOLE_NOISE_STD
    n: int = 2000
    N: int = 20000
    seed: int = 0

    def __post_init__(self):
        th = np.asarray(self.theta_true, dtype=float)
        if th.shape != (3,) or np.any(th < 0) or np.any(th > 1):
            raise ValidationError("theta_true must be a point of [0, 1]^3")
        if self.n < 1 or self.N < 1:
            raise ValidationError("n and N must be >= 1")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")


def make_borehole_dataset(problem: BoreholeProblem) -> CalibrationDataset:
    ss = np.random.SeedSequence(problem.seed)
    s_x, s_sim, s_noise = ss.spawn(3)
    X = lhs(problem.n, 5, s_x)
    design = lhs(problem.N, 8, s_sim)
    Xstar, T = design[:, :5], design[:, 5:]
    Z = borehole_eta(Xstar, T)
    theta = np.asarray(problem.theta_true, dtype=float)
    noise = np.random.default_rng(s_noise).standard_normal(problem.n)
    Y = borehole_eta(X, theta) + borehole_delta(X) + problem.noise_std * noise
    return CalibrationDataset(X, Y[:, None], Xstar, T, Z[:, None])


# --- illustrative 1-D problem -----------------------------------------------------

@dataclass(frozen=True)
class Illustrative1DProblem:
    theta_prior_mean: float = 0.0
    theta_prior_var: float = 1.0
    sigma_eta: float = 1.0
    A_eta: float = 0.5
    sigma_delta: float = 0.2
    A_delta: float = 1.0 / 20.0
    N: int = 7
    n: int = 4
    x_range: tuple = (0.0, 1.0)
    t_range: tuple = (-2.5, 2.5)
    obs_noise: float = 1e-3


@dataclass(frozen=True, eq=False)
class IllustrativeDraw:
    dataset: CalibrationDataset
    theta_true: float
    eta_field: np.ndarray
    delta_field: np.ndarray


def _gauss_gram(A, B, sigma, precision):
    d = A[:, None, :] - B[None, :, :]
    return sigma**2 * np.exp(-0.5 * np.sum(np.asarray(precision) * d * d, axis=-1))


def _gp_draw(points, sigma, precision, rng):
    if sigma == 0:
        return np.zeros(points.shape[0])
    K = _gauss_gram(points, points, sigma, precision)
    jitter = 1e-10 * sigma**2
    L = np.linalg.cholesky(K + jitter * np.eye(len(points)))
    return L @ rng.standard_normal(len(points))


def sample_illustrative(problem: Illustrative1DProblem, seed) -> IllustrativeDraw:
    """Exact GP-prior draw of the simulator and discrepancy on a space-filling design."""
    ss = np.random.SeedSequence(seed)
    s_design, s_theta, s_eta, s_delta, s_noise, s_x = ss.spawn(6)
    (x0, x1), (t0, t1) = problem.x_range, problem.t_range
    design = lhs(problem.N, 2, s_design)
    Xstar = x0 + (x1 - x0) * design[:, :1]
    T = t0 + (t1 - t0) * design[:, 1:]
    u = np.random.default_rng(s_x).random(problem.n)
    X = (x0 + (x1 - x0) * (np.arange(problem.n) + u) / problem.n)[:, None]
    theta_true = float(
        problem.theta_prior_mean + math.sqrt(problem.theta_prior_var) * np.random.default_rng(s_theta).standard_normal()
    )
    pts = np.concatenate([np.hstack([Xstar, T]), np.hstack([X, np.full_like(X, theta_true)])])
    eta = _gp_draw(pts, problem.sigma_eta, [problem.A_eta, problem.A_eta], np.random.default_rng(s_eta))
    Z, eta_field = eta[: problem.N], eta[problem.N :]
    delta = _gp_draw(X, problem.sigma_delta, [problem.A_delta], np.random.default_rng(s_delta))
    Y = eta_field + delta + problem.obs_noise * np.random.default_rng(s_noise).standard_normal(problem.n)
    ds = CalibrationDataset(X, Y[:, None], Xstar, T, Z[:, None])
    return IllustrativeDraw(ds, theta_true, eta_field, delta)


def make_illustrative_dataset(problem: Illustrative1DProblem, seed):
    draw = sample_illustrative(problem, seed)
    return draw.dataset, draw.theta_true


def illustrative_model(
    problem: Illustrative1DProblem,
    n_rf: int = 100,
    seed: int = 0,
    noise: NoiseParams = NoiseParams(0.2, 0.2),
) -> CalibrationModel:
    """Additive model with the generating hyperparameters held as known values."""
    return build_model(
        1, 1, 1, n_rf=n_rf, discrepancy="additive",
        emulator_kernels=[KernelParams(problem.sigma_eta, [problem.A_eta, problem.A_eta])],
        disc_kernel=KernelParams(problem.sigma_delta, [problem.A_delta]),
        noise=noise, seed=seed,
    )


# --- analytic theta posterior -------------------------------------------------------

def _stacked_design(model: CalibrationModel, dataset: CalibrationDataset, theta):
    """Features of every data row w.r.t. the stacked weights [W_eta; W_delta] and the noise variances."""
    if len(model.emulator_layers) != 1:
        raise ModeError("the analytic oracle needs a shallow emulator")
    if not isinstance(model.discrepancy, (Additive, NoDiscrepancy)):
        raise ModeError("the analytic oracle needs additive or no discrepancy (general mode is not linear in W)")
    layer = model.emulator_layers[0]
    theta = np.asarray(theta, dtype=float).reshape(1, -1)
    field_in = np.hstack([dataset.X, np.repeat(theta, dataset.n, axis=0)])
    phi_f, _ = feature_map(layer, field_in)
    phi_s, _ = feature_map(layer, dataset.sim_inputs)
    if isinstance(model.discrepancy, Additive):
        phi_d, _ = feature_map(model.discrepancy.layer, dataset.X)
        top = np.hstack([phi_f, phi_d])
        bottom = np.hstack([phi_s, np.zeros((dataset.N, phi_d.shape[1]))])
    else:
        top, bottom = phi_f, phi_s
    Phi = np.vstack([top, bottom])
    noise_var = np.concatenate(
        [np.full(dataset.n, model.noise.sigma_y**2), np.full(dataset.N, model.noise.sigma_z**2)]
    )
    return Phi, noise_var, np.vstack([dataset.Y, dataset.Z])


def theta_log_lik(model: CalibrationModel, dataset: CalibrationDataset, theta) -> float:
    """log p(Y, Z | theta) with the weights integrated out, via the weight-space identity."""
    Phi, nv, targets = _stacked_design(model, dataset, theta)
    M, P = Phi.shape
    Pw = Phi / nv[:, None]
    K = np.eye(P) + Phi.T @ Pw
    cf = cho_factor(K, lower=True)
    logdet = np.sum(np.log(nv)) + 2.0 * np.sum(np.log(np.diag(cf[0])))
    total = 0.0
    for o in range(targets.shape[1]):
        y = targets[:, o]
        b = Pw.T @ y
        quad = np.sum(y * y / nv) - b @ cho_solve(cf, b)
        total += -0.5 * (M * math.log(2 * math.pi) + logdet + quad)
    return float(total)


def theta_log_lik_dense(model: CalibrationModel, dataset: CalibrationDataset, theta) -> float:
    """Same quantity from the full data-space covariance Phi Phi^T + noise."""
    Phi, nv, targets = _stacked_design(model, dataset, theta)
    cov = Phi @ Phi.T + np.diag(nv)
    return float(sum(multivariate_normal(np.zeros(len(nv)), cov).logpdf(targets[:, o]) for o in range(targets.shape[1])))


@dataclass(frozen=True, eq=False)
class GridPosterior:
    axes: tuple
    density: np.ndarray
    log_lik: np.ndarray
    log_prior: np.ndarray
    log_marginal: float
    cell_volume: float

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def mean(self) -> np.ndarray:
        w = self.density.ravel() * self.cell_volume
        return w @ self.points

    def std(self) -> np.ndarray:
        w = self.density.ravel() * self.cell_volume
        pts = self.points
        mu = w @ pts
        return np.sqrt(w @ (pts - mu) ** 2)


def default_theta_grid(priors: VariationalPosterior, points: Optional[int] = None) -> list[np.ndarray]:
    d2 = priors.q_theta.size
    if points is None:
        points = 401 if d2 == 1 else max(3, int(MAX_ORACLE_GRID ** (1.0 / d2)))
    mu, sd = priors.q_theta.mean, priors.q_theta.std
    return [np.linspace(m - 4 * s, m + 4 * s, points) for m, s in zip(mu, sd)]


def analytic_theta_posterior(model, dataset, theta_grid, priors: VariationalPosterior) -> GridPosterior:
    """Grid posterior over theta with the random-feature weights integrated out.

    ``theta_grid`` is a 1-D array (d2 = 1) or one uniform axis per theta
    dimension; the posterior is evaluated on their tensor product and
    normalised by the cell volume.
    """
    if dataset.n + dataset.N > MAX_ORACLE_ROWS:
        raise ValidationError(
            f"analytic oracle limited to {MAX_ORACLE_ROWS} data rows, got {dataset.n + dataset.N}"
        )
    d2 = model.theta_dim
    axes = [np.asarray(theta_grid, dtype=float)] if d2 == 1 and np.ndim(theta_grid[0]) == 0 else [np.asarray(a, dtype=float) for a in theta_grid]
    if len(axes) != d2:
        raise ValidationError(f"need {d2} grid axes, got {len(axes)}")
    size = int(np.prod([len(a) for a in axes]))
    if size > MAX_ORACLE_GRID:
        raise ValidationError(f"grid of {size} points exceeds the oracle limit")
    steps = []
    for a in axes:
        if len(a) < 2 or not np.allclose(np.diff(a), a[1] - a[0], rtol=1e-9, atol=0):
            raise ValidationError("grid axes must be uniform with at least two points")
        steps.append(a[1] - a[0])
    cell = float(np.prod(steps))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    mu, sd = priors.q_theta.mean, priors.q_theta.std
    log_prior = np.sum(-0.5 * math.log(2 * math.pi) - np.log(sd) - 0.5 * ((pts - mu) / sd) ** 2, axis=1)
    log_lik = np.array([theta_log_lik(model, dataset, p) for p in pts])
    log_joint = log_lik + log_prior
    log_marg = float(logsumexp(log_joint) + math.log(cell))
    density = np.exp(log_joint - log_marg)
    shape = tuple(len(a) for a in axes)
    return GridPosterior(tuple(axes), density.reshape(shape), log_lik.reshape(shape), log_prior.reshape(shape), log_marg, cell)


# --- metrics -------------------------------------------------------------------------

def mse_metric(eta_fn: Callable, X, Y, theta_samples) -> float:
    """E_q ||Y - eta(X, theta)||^2 / n, averaged over the theta samples."""
    theta_samples = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    if theta_samples.shape[0] < 1:
        raise ValidationError("mse_metric needs at least one theta sample")
    Y = np.asarray(Y, dtype=float)
    Y = Y.reshape(Y.shape[0], -1)
    n = Y.shape[0]
    errs = []
    for th in theta_samples:
        pred = np.asarray(eta_fn(X, th), dtype=float).reshape(n, -1)
        errs.append(np.sum((Y - pred) ** 2) / n)
    return float(np.mean(errs))


def tv_distance(samples, grid: GridPosterior) -> float:
    """Total variation between a histogram of 1-D samples and a grid density.

    Bins are centred on the grid points (one bin per point).
    """
    if len(grid.axes) != 1:
        raise ValidationError("tv_distance supports a single theta dimension")
    a = grid.axes[0]
    h = a[1] - a[0]
    edges = np.concatenate([a - h / 2, [a[-1] + h / 2]])
    samples = np.asarray(samples, dtype=float).ravel()
    counts, _ = np.histogram(samples, bins=edges)
    p_hist = counts / samples.size
    p_grid = grid.density * grid.cell_volume
    return 0.5 * float(np.sum(np.abs(p_hist - p_grid)))
