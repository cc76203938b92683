"""Mean-field Gaussian posterior and the reparameterised ELBO estimator.

Noise is always injected through an :class:`EpsBank`; nothing here draws
random numbers except :func:`draw_eps` and :func:`posterior_samples`.
With a fixed bank the ELBO is a deterministic, differentiable function of
the variational parameters and the model hyperparameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .model import LOG_2PI, CalibrationModel, NoDiscrepancy, emulator_batch, field_batch


@dataclass(frozen=True, eq=False)
class GaussianFactor:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).ravel().copy()
        log_std = np.atleast_1d(np.asarray(self.log_std, dtype=float)).ravel().copy()
        if mean.shape != log_std.shape:
            raise ShapeError(f"mean has length {mean.size}, log_std has length {log_std.size}")
        mean.setflags(write=False)
        log_std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def size(self) -> int:
        return self.mean.size

    @classmethod
    def standard(cls, size: int) -> "GaussianFactor":
        return cls(np.zeros(size), np.zeros(size))

    @classmethod
    def from_moments(cls, mean, var) -> "GaussianFactor":
        var = np.asarray(var, dtype=float)
        if np.any(var <= 0):
            raise ValidationError(f"variances must be > 0, got {var}")
        return cls(mean, 0.5 * np.log(var))


@dataclass(frozen=True, eq=False)
class VariationalPosterior:
    """q(theta) plus one flattened factor per weight matrix (emulator layers, then discrepancy)."""

    q_theta: GaussianFactor
    q_weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "q_weights", tuple(self.q_weights))

    def factors(self) -> list[GaussianFactor]:
        return [self.q_theta, *self.q_weights]

    def check(self, model: CalibrationModel):
        if self.q_theta.size != model.theta_dim:
            raise ShapeError(f"q_theta has length {self.q_theta.size}, model theta_dim is {model.theta_dim}")
        shapes = model.weight_shapes()
        if len(shapes) != len(self.q_weights):
            raise ShapeError(f"posterior has {len(self.q_weights)} weight factors, model needs {len(shapes)}")
        for i, (shape, f) in enumerate(zip(shapes, self.q_weights)):
            if f.size != shape[0] * shape[1]:
                raise ShapeError(f"weight factor {i} has {f.size} entries, expected {shape[0]}x{shape[1]}")


def make_priors(model: CalibrationModel, theta_mean, theta_var) -> VariationalPosterior:
    """Gaussian prior on theta, i.i.d. standard normal on every weight."""
    theta_mean = np.broadcast_to(np.asarray(theta_mean, dtype=float), (model.theta_dim,))
    theta_var = np.broadcast_to(np.asarray(theta_var, dtype=float), (model.theta_dim,))
    return VariationalPosterior(
        GaussianFactor.from_moments(theta_mean, theta_var),
        tuple(GaussianFactor.standard(r * c) for r, c in model.weight_shapes()),
    )


@dataclass(frozen=True, eq=False)
class EpsBank:
    """Standard-normal draws: theta (S, d2) and one (S, rows, cols) array per weight matrix."""

    theta: np.ndarray
    weights: tuple

    @property
    def n_mc(self) -> int:
        return self.theta.shape[0]


def draw_eps(model: CalibrationModel, n_mc: int, rng: np.random.Generator) -> EpsBank:
    if n_mc < 1:
        raise ValidationError(f"n_mc must be >= 1, got {n_mc}")
    theta = rng.standard_normal((n_mc, model.theta_dim))
    weights = tuple(rng.standard_normal((n_mc, r, c)) for r, c in model.weight_shapes())
    return EpsBank(theta, weights)


def zero_eps(model: CalibrationModel, n_mc: int = 1) -> EpsBank:
    return EpsBank(
        np.zeros((n_mc, model.theta_dim)),
        tuple(np.zeros((n_mc, r, c)) for r, c in model.weight_shapes()),
    )


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    """One draw of theta and every weight matrix, in model order."""

    theta: np.ndarray
    weights: tuple


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    expected_loglik: float
    kl: float
    n_mc: int
    minibatch_size: int


def reparam_sample(factor: GaussianFactor, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1:] != (factor.size,):
        raise ShapeError(f"eps has trailing length {eps.shape[-1] if eps.ndim else 0}, factor has {factor.size}")
    return factor.mean + factor.std * eps


def kl_gaussian(q: GaussianFactor, p: GaussianFactor) -> float:
    if q.size != p.size:
        raise ShapeError(f"KL between factors of length {q.size} and {p.size}")
    ratio = np.exp(2.0 * (q.log_std - p.log_std))
    d = (q.mean - p.mean) / p.std
    return float(0.5 * np.sum(ratio + d * d - 1.0 - 2.0 * (q.log_std - p.log_std)))


def _check_idx(idx, size: int, what: str) -> Optional[np.ndarray]:
    if idx is None:
        return None
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.size == 0:
        raise ValidationError(f"{what} must be a non-empty 1-D index set")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError(f"{what} must contain integers")
    if idx.min() < 0 or idx.max() >= size:
        raise ValidationError(f"{what} has entries outside [0, {size})")
    return idx


def _split(model: CalibrationModel, weights):
    n_eta = len(model.emulator_layers)
    W_eta = list(weights[:n_eta])
    W_disc = None if isinstance(model.discrepancy, NoDiscrepancy) else weights[n_eta]
    return W_eta, W_disc


def batch_loglik(model, dataset, theta, weights, field_idx, sim_idx, keep=False):
    """Minibatch log-likelihood for S parameter draws at once.

    ``theta`` is (S, d2), ``weights`` a list of (S, rows, cols) arrays.
    ``field_idx`` or ``sim_idx`` set to None drops that block entirely.
    Returns per-draw values of shape (S,), plus a cache when ``keep``.
    """
    W_eta, W_disc = _split(model, weights)
    S = theta.shape[0]
    total = np.zeros(S)
    cache = {}
    sy, sz = model.noise.sigma_y, model.noise.sigma_z
    if field_idx is not None:
        m = field_idx.size
        X, Y = dataset.X[field_idx], dataset.Y[field_idx]
        f, eta, fcache = field_batch(model, W_eta, W_disc, X, theta)
        r = Y - f
        ll = -0.5 * LOG_2PI - np.log(sy) - r * r / (2.0 * sy * sy)
        coef = dataset.n / m
        total = total + coef * ll.sum(axis=(1, 2))
        if keep:
            cache["field"] = (X, r, coef, eta, fcache)
    if sim_idx is not None:
        m = sim_idx.size
        inputs = np.broadcast_to(dataset.sim_inputs[sim_idx], (S, m, dataset.d1 + dataset.d2))
        eta_s, scache = emulator_batch(model, W_eta, inputs)
        r = dataset.Z[sim_idx] - eta_s
        ll = -0.5 * LOG_2PI - np.log(sz) - r * r / (2.0 * sz * sz)
        coef = dataset.N / m
        total = total + coef * ll.sum(axis=(1, 2))
        if keep:
            cache["sim"] = (inputs, r, coef, scache)
    return (total, cache) if keep else total


def minibatch_loglik(model, dataset, sample: PosteriorSample, field_idx, sim_idx) -> float:
    """(n/m_f) * field log-lik over field_idx + (N/m_s) * simulator log-lik over sim_idx."""
    field_idx = _check_idx(field_idx, dataset.n, "field_idx")
    sim_idx = _check_idx(sim_idx, dataset.N, "sim_idx")
    theta = np.asarray(sample.theta, dtype=float).reshape(1, -1)
    weights = [np.asarray(W, dtype=float)[None] for W in sample.weights]
    return float(batch_loglik(model, dataset, theta, weights, field_idx, sim_idx)[0])


def sample_parameters(model, posterior: VariationalPosterior, eps: EpsBank):
    theta = reparam_sample(posterior.q_theta, eps.theta)
    weights = [
        reparam_sample(q, e.reshape(e.shape[0], -1)).reshape(e.shape)
        for q, e in zip(posterior.q_weights, eps.weights)
    ]
    return theta, weights


def elbo_forward(model, dataset, posterior, priors, field_idx, sim_idx, eps: EpsBank, keep=False):
    theta, weights = sample_parameters(model, posterior, eps)
    out = batch_loglik(model, dataset, theta, weights, field_idx, sim_idx, keep=keep)
    per_draw, cache = out if keep else (out, None)
    expected = float(np.mean(per_draw))
    kl = 0.0
    for q, p in zip(posterior.factors(), priors.factors()):
        kl += kl_gaussian(q, p)
    m = (0 if field_idx is None else field_idx.size) + (0 if sim_idx is None else sim_idx.size)
    est = ElboEstimate(expected - kl, expected, kl, eps.n_mc, m)
    if keep:
        return est, (theta, weights, cache)
    return est


def elbo(model, dataset, posterior, priors, n_mc: int, field_idx, sim_idx, eps_bank: EpsBank) -> ElboEstimate:
    """Reparameterised Monte Carlo ELBO with minibatch scaling and analytic KL."""
    if n_mc < 1 or eps_bank.n_mc != n_mc:
        raise ValidationError(f"n_mc={n_mc} must be >= 1 and match eps_bank ({eps_bank.n_mc} draws)")
    posterior.check(model)
    priors.check(model)
    _check_eps(model, eps_bank)
    field_idx = _check_idx(field_idx, dataset.n, "field_idx")
    sim_idx = _check_idx(sim_idx, dataset.N, "sim_idx")
    return elbo_forward(model, dataset, posterior, priors, field_idx, sim_idx, eps_bank)


def _check_eps(model, eps: EpsBank):
    S = eps.n_mc
    if eps.theta.shape != (S, model.theta_dim):
        raise ShapeError(f"eps_bank.theta shape {eps.theta.shape}, expected {(S, model.theta_dim)}")
    shapes = model.weight_shapes()
    if len(eps.weights) != len(shapes):
        raise ShapeError(f"eps_bank has {len(eps.weights)} weight blocks, expected {len(shapes)}")
    for i, (e, shape) in enumerate(zip(eps.weights, shapes)):
        if e.shape != (S, *shape):
            raise ShapeError(f"eps_bank weight block {i} shape {e.shape}, expected {(S, *shape)}")


def posterior_samples(posterior: VariationalPosterior, count: int, seed, with_weights: bool = False):
    """Reparameterised theta draws, shape (count, d2); optionally weight draws too."""
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    theta = reparam_sample(posterior.q_theta, rng.standard_normal((count, posterior.q_theta.size)))
    if not with_weights:
        return theta
    weights = [reparam_sample(q, rng.standard_normal((count, q.size))) for q in posterior.q_weights]
    return theta, weights


def unflatten_weights(model: CalibrationModel, flat: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Reshape flattened weight draws (count, r*c) back to (count, r, c)."""
    return [np.asarray(w).reshape(-1, r, c) for w, (r, c) in zip(flat, model.weight_shapes())]


def mean_sample(model: CalibrationModel, posterior: VariationalPosterior) -> PosteriorSample:
    weights = tuple(q.mean.reshape(shape) for q, shape in zip(posterior.q_weights, model.weight_shapes()))
    return PosteriorSample(posterior.q_theta.mean, weights)
