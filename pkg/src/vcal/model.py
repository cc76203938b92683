"""Calibration model: random-feature emulator plus discrepancy and noise.

Field response is ``f(x, theta) = eta(x, theta) + delta(x)`` in additive
mode, ``g(eta, x) = eta + phi_g([eta, x]) @ W_g`` in general (warped) mode,
and plain ``eta`` without discrepancy. Simulator outputs depend on the
emulator alone.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ModeError, ShapeError, ValidationError
from .rff import (
    DeepEmulatorConfig,
    KernelParams,
    RandomFeatureLayer,
    build_layer,
    check_chain,
    feature_map,
    stack_forward,
)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class CalibrationDataset:
    X: np.ndarray
    Y: np.ndarray
    Xstar: np.ndarray
    T: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("X", "Y", "Xstar", "T", "Z"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim == 1:
                a = a[:, None]
            if a.ndim != 2:
                raise ShapeError(f"{name} must be a matrix, got shape {a.shape}")
            a = a.copy()
            a.setflags(write=False)
            arrays[name] = a
            object.__setattr__(self, name, a)
        X, Y, Xs, T, Z = (arrays[k] for k in ("X", "Y", "Xstar", "T", "Z"))
        if X.shape[0] < 1 or Xs.shape[0] < 1:
            raise ShapeError("need at least one field row and one simulator row")
        if X.shape[0] != Y.shape[0]:
            raise ShapeError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if not (Xs.shape[0] == T.shape[0] == Z.shape[0]):
            raise ShapeError(
                f"Xstar/T/Z row counts differ: {Xs.shape[0]}, {T.shape[0]}, {Z.shape[0]}"
            )
        if X.shape[1] != Xs.shape[1]:
            raise ShapeError(f"X has {X.shape[1]} columns but Xstar has {Xs.shape[1]}")
        if Y.shape[1] != Z.shape[1]:
            raise ShapeError(f"Y has {Y.shape[1]} columns but Z has {Z.shape[1]}")

    n = property(lambda self: self.X.shape[0])
    N = property(lambda self: self.Xstar.shape[0])
    d1 = property(lambda self: self.X.shape[1])
    d2 = property(lambda self: self.T.shape[1])
    d_out = property(lambda self: self.Y.shape[1])

    @cached_property
    def sim_inputs(self) -> np.ndarray:
        out = np.concatenate([self.Xstar, self.T], axis=1)
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class NoiseParams:
    sigma_y: float
    sigma_z: float

    def __post_init__(self):
        for name in ("sigma_y", "sigma_z"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise ValidationError(f"{name} must be > 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True, eq=False)
class Additive:
    layer: RandomFeatureLayer


@dataclass(frozen=True, eq=False)
class General:
    layer: RandomFeatureLayer


@dataclass(frozen=True)
class NoDiscrepancy:
    pass


DiscrepancyMode = Union[Additive, General, NoDiscrepancy]


@dataclass(frozen=True, eq=False)
class CalibrationModel:
    emulator: DeepEmulatorConfig
    emulator_layers: tuple
    discrepancy: DiscrepancyMode
    noise: NoiseParams
    theta_dim: int

    def __post_init__(self):
        layers = tuple(self.emulator_layers)
        object.__setattr__(self, "emulator_layers", layers)
        if len(layers) != len(self.emulator.layers):
            raise ShapeError("emulator config and built layers disagree in depth")
        if self.theta_dim < 1:
            raise ShapeError("theta_dim must be >= 1")
        d_in = layers[0].input_dim
        if d_in <= self.theta_dim:
            raise ShapeError(
                f"emulator input_dim {d_in} leaves no room for x with theta_dim {self.theta_dim}"
            )
        for i, (layer, dim) in enumerate(zip(layers, self.emulator.input_dims(d_in))):
            if layer.input_dim != dim:
                raise ShapeError(f"emulator layer {i}: input_dim {layer.input_dim}, expected {dim}")
        disc = self.discrepancy
        if isinstance(disc, Additive) and disc.layer.input_dim != self.d1:
            raise ShapeError(f"additive layer input_dim {disc.layer.input_dim}, expected d1={self.d1}")
        if isinstance(disc, General) and disc.layer.input_dim != self.d_out + self.d1:
            raise ShapeError(
                f"warp layer input_dim {disc.layer.input_dim}, expected d_out+d1={self.d_out + self.d1}"
            )

    @property
    def d1(self) -> int:
        return self.emulator_layers[0].input_dim - self.theta_dim

    @property
    def d_out(self) -> int:
        return self.emulator.output_dim

    @property
    def disc_layer(self) -> Optional[RandomFeatureLayer]:
        return getattr(self.discrepancy, "layer", None)

    def weight_shapes(self) -> list[tuple[int, int]]:
        """Shapes of every weight matrix: emulator layers first, then discrepancy."""
        shapes = [(layer.n_rf, hidden) for layer, (hidden, _) in zip(self.emulator_layers, self.emulator.layers)]
        if self.disc_layer is not None:
            shapes.append((self.disc_layer.n_rf, self.d_out))
        return shapes

    def with_hyperparams(
        self,
        noise: NoiseParams,
        emulator_kernels: Sequence[KernelParams],
        disc_kernel: Optional[KernelParams] = None,
    ) -> "CalibrationModel":
        layers = tuple(l.with_kernel(k) for l, k in zip(self.emulator_layers, emulator_kernels))
        config = DeepEmulatorConfig(
            tuple((h, k) for (h, _), k in zip(self.emulator.layers, emulator_kernels)),
            self.emulator.concat_input,
        )
        disc = self.discrepancy
        if disc_kernel is not None and not isinstance(disc, NoDiscrepancy):
            disc = type(disc)(disc.layer.with_kernel(disc_kernel))
        return replace(self, emulator=config, emulator_layers=layers, discrepancy=disc, noise=noise)


def build_model(
    d1: int,
    d2: int,
    d_out: int = 1,
    n_rf: int = 100,
    discrepancy: str = "additive",
    emulator_kernels: Optional[Sequence[KernelParams]] = None,
    hidden_dims: Sequence[int] = (),
    concat_input: bool = False,
    disc_kernel: Optional[KernelParams] = None,
    noise: NoiseParams = NoiseParams(1e-2, 1e-3),
    seed: int = 0,
    layer_seeds: Optional[Sequence[int]] = None,
) -> CalibrationModel:
    """Assemble a model with freshly drawn frequencies.

    ``hidden_dims`` lists the widths of the hidden emulator layers (empty for
    a shallow emulator); ``emulator_kernels`` needs one entry per layer.
    Layer seeds derive from ``seed`` unless given explicitly.
    """
    d_in = d1 + d2
    dims_out = list(hidden_dims) + [d_out]
    n_layers = len(dims_out)
    if emulator_kernels is None:
        emulator_kernels = [KernelParams.isotropic(1.0, 20.0, d_in)] + [
            KernelParams.isotropic(1.0, 2.0, h + (d_in if concat_input else 0)) for h in hidden_dims
        ]
    if len(emulator_kernels) != n_layers:
        raise ShapeError(f"need {n_layers} emulator kernels, got {len(emulator_kernels)}")
    config = DeepEmulatorConfig(tuple(zip(dims_out, emulator_kernels)), concat_input)
    if layer_seeds is None:
        layer_seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_layers + 1)]
    layers = tuple(
        build_layer(dim, n_rf, k, layer_seeds[i])
        for i, (dim, k) in enumerate(zip(config.input_dims(d_in), emulator_kernels))
    )
    mode = discrepancy.lower()
    if mode in ("none", "nodiscrepancy"):
        disc: DiscrepancyMode = NoDiscrepancy()
    else:
        width = d1 if mode == "additive" else d_out + d1
        if disc_kernel is None:
            disc_kernel = KernelParams.isotropic(0.1, 20.0, width)
        if mode == "additive":
            disc = Additive(build_layer(width, n_rf, disc_kernel, layer_seeds[n_layers]))
        elif mode == "general":
            disc = General(build_layer(width, n_rf, disc_kernel, layer_seeds[n_layers]))
        else:
            raise ValidationError(f"unknown discrepancy mode {discrepancy!r}; use additive, general or none")
    return CalibrationModel(config, layers, disc, noise, d2)


def layer_seeds(model: CalibrationModel) -> list[int]:
    seeds = [l.seed for l in model.emulator_layers]
    if model.disc_layer is not None:
        seeds.append(model.disc_layer.seed)
    return seeds


# --- batched forward passes ---------------------------------------------------

def emulator_batch(model: CalibrationModel, W_eta, inputs):
    return stack_forward(model.emulator_layers, W_eta, inputs, model.emulator.concat_input)


def field_batch(model: CalibrationModel, W_eta, W_disc, X, theta):
    """Field latent ``f`` for rows of X at sampled theta.

    ``theta`` has shape (S, d2) and weights carry the same leading S axis.
    Returns ``(f, eta, cache)`` with f of shape (S, m, d_out).
    """
    S, m = theta.shape[0], X.shape[0]
    inputs = np.concatenate(
        [np.broadcast_to(X, (S, m, X.shape[1])), np.broadcast_to(theta[:, None, :], (S, m, theta.shape[1]))],
        axis=-1,
    )
    eta, em_cache = emulator_batch(model, W_eta, inputs)
    disc = model.discrepancy
    if isinstance(disc, NoDiscrepancy):
        return eta, eta, (inputs, em_cache, None)
    if isinstance(disc, Additive):
        phi, _ = feature_map(disc.layer, X)
        return eta + phi @ W_disc, eta, (inputs, em_cache, (X, phi))
    warp_in = np.concatenate([eta, np.broadcast_to(X, eta.shape[:-1] + X.shape[-1:])], axis=-1)
    phi, _ = feature_map(disc.layer, warp_in)
    return eta + phi @ W_disc, eta, (inputs, em_cache, (warp_in, phi))


# --- single-point public operations -------------------------------------------

def _vec(v, dim, what):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != dim:
        raise ShapeError(f"{what} has shape {v.shape}, expected ({dim},)")
    return v


def _weights(model, W_eta):
    W_eta = [np.asarray(W, dtype=float) for W in W_eta]
    check_chain(model.emulator, model.emulator_layers, W_eta, model.emulator_layers[0].input_dim)
    return W_eta


def emulator_eval(model: CalibrationModel, W_eta, x, theta) -> np.ndarray:
    x = _vec(x, model.d1, "x")
    theta = _vec(theta, model.theta_dim, "theta")
    W_eta = _weights(model, W_eta)
    out, _ = emulator_batch(model, W_eta, np.concatenate([x, theta]))
    return out


def field_eval(model: CalibrationModel, W_eta, W_disc, x, theta) -> np.ndarray:
    x = _vec(x, model.d1, "x")
    eta = emulator_eval(model, W_eta, x, theta)
    disc = model.discrepancy
    if isinstance(disc, NoDiscrepancy):
        return eta
    W_disc = np.asarray(W_disc, dtype=float)
    if W_disc.shape != (disc.layer.n_rf, model.d_out):
        raise ShapeError(f"discrepancy weights shape {W_disc.shape}, expected {(disc.layer.n_rf, model.d_out)}")
    if isinstance(disc, Additive):
        return eta + feature_map(disc.layer, x)[0] @ W_disc
    return eta + feature_map(disc.layer, np.concatenate([eta, x]))[0] @ W_disc


def warp(model: CalibrationModel, W_g, x, eta_value) -> np.ndarray:
    """The warp ``g(eta, x)`` evaluated at a given emulator value."""
    if not isinstance(model.discrepancy, General):
        raise ModeError("warp is only defined for the general discrepancy mode")
    x = _vec(x, model.d1, "x")
    eta_value = _vec(eta_value, model.d_out, "eta_value")
    layer = model.discrepancy.layer
    return eta_value + feature_map(layer, np.concatenate([eta_value, x]))[0] @ np.asarray(W_g, dtype=float)


def warp_derivative(model: CalibrationModel, W_g, x, eta_value) -> np.ndarray:
    """Jacobian d g(eta, x) / d eta, shape (d_out, d_out); entry [a, b] = dg_a/deta_b."""
    if not isinstance(model.discrepancy, General):
        raise ModeError("warp_derivative needs a model in general discrepancy mode")
    x = _vec(x, model.d1, "x")
    eta_value = _vec(eta_value, model.d_out, "eta_value")
    layer = model.discrepancy.layer
    W_g = np.asarray(W_g, dtype=float)
    phi, _ = feature_map(layer, np.concatenate([eta_value, x]))
    half = layer.n_rf // 2
    omega_eta = layer.frequencies[:, : model.d_out]
    # d cos-feature / d eta = -phi_sin * omega ; d sin-feature / d eta = phi_cos * omega
    dphi = np.concatenate([-phi[half:, None] * omega_eta, phi[:half, None] * omega_eta], axis=0)
    return np.eye(model.d_out) + W_g.T @ dphi


def _gauss_loglik(obs, pred, sigma, what):
    obs = np.asarray(obs, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if obs.shape != pred.shape:
        raise ShapeError(f"{what}: observation shape {obs.shape} != prediction shape {pred.shape}")
    if obs.size == 0:
        raise ShapeError(f"{what}: empty output vector")
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValidationError(f"{what}: noise std must be > 0, got {sigma}")
    r = obs - pred
    return float(np.sum(-0.5 * LOG_2PI - np.log(sigma) - r * r / (2.0 * sigma * sigma)))


def log_lik_field(y, f, sigma_y) -> float:
    return _gauss_loglik(y, f, sigma_y, "log_lik_field")


def log_lik_sim(z, eta_star, sigma_z) -> float:
    return _gauss_loglik(z, eta_star, sigma_z, "log_lik_sim")


def standardize_outputs(dataset: CalibrationDataset):
    """Shift/scale Y and Z by the simulator output mean and std.

    Returns ``(standardized_dataset, shift, scale)``; inputs are untouched.
    """
    shift = dataset.Z.mean(axis=0)
    scale = dataset.Z.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (
        CalibrationDataset(dataset.X, (dataset.Y - shift) / scale, dataset.Xstar, dataset.T, (dataset.Z - shift) / scale),
        shift,
        scale,
    )
