"""Exact ELBO gradients at fixed noise.

Every trainable scalar lives in a flat :class:`ParamVector`. Positive
hyperparameters are stored as logs. The backward pass is written out by
hand: the model is a short chain of matmuls, sin/cos features and Gaussian
log-densities, so explicit adjoints are short and fast in numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteError, ShapeError
from .model import CalibrationModel, General, NoDiscrepancy, NoiseParams
from .rff import KernelParams, feature_map_backward, stack_backward
from .svi import (
    EpsBank,
    GaussianFactor,
    VariationalPosterior,
    _check_eps,
    _check_idx,
    _split,
    elbo_forward,
)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: dict  # name -> (offset, shape)

    def __len__(self):
        return self.values.size

    def block(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        size = math.prod(shape)
        return self.values[off : off + size].reshape(shape)

    def indices(self, names) -> np.ndarray:
        """Flat positions covered by the named blocks."""
        out = []
        for name in names:
            off, shape = self.layout[name]
            out.append(np.arange(off, off + math.prod(shape)))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout))

    def with_values(self, values) -> "ParamVector":
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise ShapeError(f"values length {values.size} != layout length {self.values.size}")
        return ParamVector(values, self.layout)


@dataclass
class GradResult:
    value: float
    grad: np.ndarray
    kl: float = float("nan")


def block_names(model: CalibrationModel) -> list[str]:
    names = ["theta.mean", "theta.log_std"]
    for i in range(len(model.emulator_layers)):
        names += [f"w_eta.{i}.mean", f"w_eta.{i}.log_std"]
    if model.disc_layer is not None:
        names += ["w_disc.mean", "w_disc.log_std"]
    names += ["noise.log_sigma_y", "noise.log_sigma_z"]
    for i in range(len(model.emulator_layers)):
        names += [f"eta.{i}.log_sigma", f"eta.{i}.log_precision"]
    if model.disc_layer is not None:
        names += ["disc.log_sigma", "disc.log_precision"]
    return names


def pack(model: CalibrationModel, posterior: VariationalPosterior) -> ParamVector:
    posterior.check(model)
    chunks = {
        "theta.mean": posterior.q_theta.mean,
        "theta.log_std": posterior.q_theta.log_std,
        "noise.log_sigma_y": np.log([model.noise.sigma_y]),
        "noise.log_sigma_z": np.log([model.noise.sigma_z]),
    }
    for i, (q, layer) in enumerate(zip(posterior.q_weights, model.emulator_layers)):
        chunks[f"w_eta.{i}.mean"] = q.mean
        chunks[f"w_eta.{i}.log_std"] = q.log_std
        chunks[f"eta.{i}.log_sigma"] = np.log([layer.kernel.sigma])
        chunks[f"eta.{i}.log_precision"] = np.log(layer.kernel.precision_diag)
    if model.disc_layer is not None:
        q = posterior.q_weights[-1]
        chunks["w_disc.mean"] = q.mean
        chunks["w_disc.log_std"] = q.log_std
        chunks["disc.log_sigma"] = np.log([model.disc_layer.kernel.sigma])
        chunks["disc.log_precision"] = np.log(model.disc_layer.kernel.precision_diag)
    layout = {}
    parts = []
    off = 0
    for name in block_names(model):
        v = np.asarray(chunks[name], dtype=float).ravel()
        layout[name] = (off, v.shape)
        parts.append(v)
        off += v.size
    return ParamVector(np.concatenate(parts), layout)


def unpack(model: CalibrationModel, params: ParamVector):
    """Rebuild ``(model, posterior)`` from a parameter vector."""
    if set(params.layout) != set(block_names(model)):
        raise ShapeError("parameter layout does not match the model")
    b = params.block
    noise = NoiseParams(float(np.exp(b("noise.log_sigma_y")[0])), float(np.exp(b("noise.log_sigma_z")[0])))
    kernels = [
        KernelParams(float(np.exp(b(f"eta.{i}.log_sigma")[0])), np.exp(b(f"eta.{i}.log_precision")))
        for i in range(len(model.emulator_layers))
    ]
    disc_kernel = None
    q_weights = [
        GaussianFactor(b(f"w_eta.{i}.mean"), b(f"w_eta.{i}.log_std")) for i in range(len(model.emulator_layers))
    ]
    if model.disc_layer is not None:
        disc_kernel = KernelParams(float(np.exp(b("disc.log_sigma")[0])), np.exp(b("disc.log_precision")))
        q_weights.append(GaussianFactor(b("w_disc.mean"), b("w_disc.log_std")))
    new_model = model.with_hyperparams(noise, kernels, disc_kernel)
    posterior = VariationalPosterior(GaussianFactor(b("theta.mean"), b("theta.log_std")), tuple(q_weights))
    return new_model, posterior


def elbo_value_grad(
    model: CalibrationModel,
    dataset,
    params: ParamVector,
    priors: VariationalPosterior,
    n_mc: int,
    field_idx,
    sim_idx,
    eps_bank: EpsBank,
) -> GradResult:
    """ELBO value and its exact gradient with respect to every parameter in ``params``.

    The value is produced by the same forward code as :func:`vcal.svi.elbo`
    evaluated at ``unpack(model, params)``, so the two agree bit for bit.
    """
    _check_finite_params(params)
    model, posterior = unpack(model, params)
    priors.check(model)
    if eps_bank.n_mc != n_mc:
        raise ShapeError(f"eps_bank has {eps_bank.n_mc} draws, n_mc={n_mc}")
    _check_eps(model, eps_bank)
    field_idx = _check_idx(field_idx, dataset.n, "field_idx")
    sim_idx = _check_idx(sim_idx, dataset.N, "sim_idx")
    est, (theta, weights, cache) = elbo_forward(
        model, dataset, posterior, priors, field_idx, sim_idx, eps_bank, keep=True
    )
    S = eps_bank.n_mc
    n_eta = len(model.emulator_layers)
    W_eta, W_disc = _split(model, weights)
    concat = model.emulator.concat_input
    sy, sz = model.noise.sigma_y, model.noise.sigma_z

    g_theta = np.zeros_like(theta)
    g_w = [np.zeros_like(w) for w in weights]
    g_eta_ls = np.zeros(n_eta)
    g_eta_lp = [np.zeros(l.input_dim) for l in model.emulator_layers]
    g_disc_ls = 0.0
    g_disc_lp = None if model.disc_layer is None else np.zeros(model.disc_layer.input_dim)
    g_log_sy = 0.0
    g_log_sz = 0.0

    def add_stack(sc, g_out):
        g_in, gw, gls, glp = stack_backward(model.emulator_layers, W_eta, sc, g_out, concat)
        for i in range(n_eta):
            g_w[i] += gw[i]
            g_eta_ls[i] += gls[i]
            g_eta_lp[i] += glp[i]
        return g_in

    if "field" in cache:
        X, r, coef, eta, (inputs, em_cache, disc_cache) = cache["field"]
        w = coef / S
        g_log_sy = w * float(np.sum(r * r / (sy * sy) - 1.0))
        g_f = w * r / (sy * sy)
        g_eta = g_f
        disc = model.discrepancy
        if not isinstance(disc, NoDiscrepancy):
            d_in, phi = disc_cache
            g_w[n_eta] += np.swapaxes(phi, -1, -2) @ g_f
            g_phi = g_f @ np.swapaxes(W_disc, -1, -2)
            g_din, g_disc_ls, g_disc_lp = feature_map_backward(disc.layer, d_in, phi, g_phi)
            if isinstance(disc, General):
                g_eta = g_f + g_din[..., : model.d_out]
        g_in = add_stack(em_cache, g_eta)
        g_theta += g_in[..., model.d1 :].sum(axis=1)

    if "sim" in cache:
        inputs, r, coef, sc = cache["sim"]
        w = coef / S
        g_log_sz = w * float(np.sum(r * r / (sz * sz) - 1.0))
        add_stack(sc, w * r / (sz * sz))

    grad = np.zeros_like(params.values)

    def put(name, v):
        off, shape = params.layout[name]
        size = math.prod(shape)
        grad[off : off + size] = np.asarray(v, dtype=float).ravel()

    # reparameterisation: sample = mean + exp(log_std) * eps, then subtract KL gradients
    def factor_grads(q: GaussianFactor, p: GaussianFactor, g_sample, eps):
        g_sample = g_sample.reshape(S, -1)
        eps = eps.reshape(S, -1)
        g_mean = g_sample.sum(axis=0) - (q.mean - p.mean) / (p.std * p.std)
        g_log_std = (g_sample * eps).sum(axis=0) * q.std - (np.exp(2.0 * (q.log_std - p.log_std)) - 1.0)
        return g_mean, g_log_std

    gm, gl = factor_grads(posterior.q_theta, priors.q_theta, g_theta, eps_bank.theta)
    put("theta.mean", gm)
    put("theta.log_std", gl)
    for i in range(n_eta):
        gm, gl = factor_grads(posterior.q_weights[i], priors.q_weights[i], g_w[i], eps_bank.weights[i])
        put(f"w_eta.{i}.mean", gm)
        put(f"w_eta.{i}.log_std", gl)
        put(f"eta.{i}.log_sigma", [g_eta_ls[i]])
        put(f"eta.{i}.log_precision", g_eta_lp[i])
    if model.disc_layer is not None:
        gm, gl = factor_grads(posterior.q_weights[n_eta], priors.q_weights[n_eta], g_w[n_eta], eps_bank.weights[n_eta])
        put("w_disc.mean", gm)
        put("w_disc.log_std", gl)
        put("disc.log_sigma", [g_disc_ls])
        put("disc.log_precision", g_disc_lp)
    put("noise.log_sigma_y", [g_log_sy])
    put("noise.log_sigma_z", [g_log_sz])

    if not np.all(np.isfinite(grad)):
        for name in params.layout:
            if not np.all(np.isfinite(params.block(name))) or not np.all(np.isfinite(_view(grad, params, name))):
                raise NonFiniteError(name)
    return GradResult(est.value, grad, est.kl)


def _check_finite_params(params: ParamVector):
    for name in params.layout:
        v = params.block(name)
        bad = not np.all(np.isfinite(v))
        if name.startswith(("noise.", "eta.", "disc.")):
            # log-hyperparameters: the positive value itself must not under- or overflow
            e = np.exp(v)
            bad = bad or not np.all(np.isfinite(e) & (e > 0))
        if bad:
            raise NonFiniteError(name, f"parameter block {name!r} is non-finite or out of range")


def _view(flat, params, name):
    off, shape = params.layout[name]
    return flat[off : off + math.prod(shape)]


def finite_diff_check(fn: Callable[[np.ndarray], float], params, h: float, grad: Optional[np.ndarray] = None, floor: float = 1e-8):
    """Central-difference relative errors of ``grad`` against ``fn``.

    ``fn`` maps a flat vector to a scalar. If ``grad`` is None, ``fn`` must
    return ``(value, grad)``. Relative error is
    ``|analytic - fd| / max(|analytic|, |fd|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    p = np.array(params.values if isinstance(params, ParamVector) else params, dtype=float)
    if grad is None:
        _, grad = fn(p)
        f = lambda v: fn(v)[0]
    else:
        f = fn
    grad = np.asarray(grad, dtype=float)
    fd = np.empty_like(p)
    for k in range(p.size):
        up = p.copy()
        dn = p.copy()
        up[k] += h
        dn[k] -= h
        fd[k] = (f(up) - f(dn)) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), floor)
    return np.abs(grad - fd) / denom
