"""Random Fourier feature approximation of Gaussian-kernel GP layers.

A layer draws ``n_rf / 2`` standard-normal base frequencies once, at
construction. The kernel hyperparameters act by rescaling those draws
(``omega = base * sqrt(precision)``), so a layer can be re-parameterised
without resampling and gradients with respect to ``sigma`` and the
precision are well defined.

Feature layout is ``[cos block | sin block]``, each scaled by
``sigma * sqrt(2 / n_rf)``, so ``phi(x) . phi(x) == sigma**2`` exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError


@dataclass(frozen=True, eq=False)
class KernelParams:
    """Gaussian kernel ``sigma^2 exp(-0.5 d^T diag(precision) d)``."""

    sigma: float
    precision_diag: np.ndarray

    def __post_init__(self):
        prec = np.atleast_1d(np.asarray(self.precision_diag, dtype=float)).copy()
        prec.setflags(write=False)
        object.__setattr__(self, "precision_diag", prec)
        object.__setattr__(self, "sigma", float(self.sigma))
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValidationError(f"kernel sigma must be > 0, got {self.sigma}")
        if prec.ndim != 1 or not np.all(np.isfinite(prec)) or np.any(prec <= 0):
            raise ValidationError(f"precision_diag entries must be > 0, got {prec}")

    @classmethod
    def isotropic(cls, sigma: float, precision: float, dim: int) -> "KernelParams":
        return cls(sigma, np.full(dim, float(precision)))

    def exact(self, x, x2) -> float:
        """Closed-form kernel value, used as the reference for the features."""
        d = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
        return self.sigma**2 * float(np.exp(-0.5 * np.sum(self.precision_diag * d * d)))


@dataclass(frozen=True, eq=False)
class RandomFeatureLayer:
    n_rf: int
    input_dim: int
    base_freqs: np.ndarray
    kernel: KernelParams
    seed: int = field(default=0)

    def __post_init__(self):
        if int(self.n_rf) != self.n_rf or self.n_rf < 2 or self.n_rf % 2:
            raise ConfigError(f"n_rf must be even and >= 2, got n_rf={self.n_rf}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got input_dim={self.input_dim}")
        base = np.array(self.base_freqs, dtype=float)
        if base.shape != (self.n_rf // 2, self.input_dim):
            raise ShapeError(
                f"base_freqs must have shape {(self.n_rf // 2, self.input_dim)}, got {base.shape}"
            )
        if self.kernel.precision_diag.shape != (self.input_dim,):
            raise ShapeError(
                f"precision_diag has length {self.kernel.precision_diag.shape[0]}, "
                f"layer input_dim is {self.input_dim}"
            )
        base.setflags(write=False)
        object.__setattr__(self, "base_freqs", base)

    @property
    def frequencies(self) -> np.ndarray:
        """Effective frequency rows, each distributed N(0, diag(precision))."""
        return self.base_freqs * np.sqrt(self.kernel.precision_diag)

    @property
    def scale(self) -> float:
        return self.kernel.sigma * np.sqrt(2.0 / self.n_rf)

    def with_kernel(self, kernel: KernelParams) -> "RandomFeatureLayer":
        return replace(self, kernel=kernel)


def build_layer(input_dim: int, n_rf: int, kernel: KernelParams, seed: int) -> RandomFeatureLayer:
    if int(n_rf) != n_rf or n_rf < 2 or n_rf % 2:
        raise ConfigError(f"n_rf must be even and >= 2, got n_rf={n_rf}")
    if input_dim < 1:
        raise ConfigError(f"input_dim must be >= 1, got input_dim={input_dim}")
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n_rf // 2, input_dim))
    return RandomFeatureLayer(int(n_rf), int(input_dim), base, kernel, int(seed))


# --- batched primitives shared by evaluation and the gradient engine ---------

def feature_map(layer: RandomFeatureLayer, inputs: np.ndarray):
    """Features for a batch of inputs with shape (..., input_dim).

    Returns ``(phi, proj)``; ``proj`` is kept for the backward pass.
    """
    proj = inputs @ layer.frequencies.T
    phi = layer.scale * np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)
    return phi, proj


def feature_map_backward(layer: RandomFeatureLayer, inputs, phi, g_phi):
    """Pull ``g_phi = dL/dphi`` back to the inputs and the log-hyperparameters.

    Returns ``(g_inputs, g_log_sigma, g_log_precision)``; the hyperparameter
    terms are summed over every batch axis.
    """
    half = layer.n_rf // 2
    phi_c, phi_s = phi[..., :half], phi[..., half:]
    g_c, g_s = g_phi[..., :half], g_phi[..., half:]
    g_proj = g_s * phi_c - g_c * phi_s
    omega = layer.frequencies
    g_inputs = g_proj @ omega
    g_log_sigma = float(np.sum(g_phi * phi))
    flat_gp = g_proj.reshape(-1, half)
    flat_in = np.broadcast_to(inputs, g_proj.shape[:-1] + (layer.input_dim,)).reshape(-1, layer.input_dim)
    g_omega = flat_gp.T @ flat_in
    # d omega / d log(precision_j) = omega[:, j] / 2
    g_log_precision = 0.5 * np.sum(g_omega * omega, axis=0)
    return g_inputs, g_log_sigma, g_log_precision


def _check_vector(x, dim: int, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != dim:
        raise ShapeError(f"{what} has length {x.shape[-1] if x.ndim else 0}, expected {dim}")
    return x


def features(layer: RandomFeatureLayer, x) -> np.ndarray:
    x = _check_vector(x, layer.input_dim)
    return feature_map(layer, x)[0]


def layer_output(layer: RandomFeatureLayer, x, W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != layer.n_rf:
        raise ShapeError(f"W has {W.shape[0] if W.ndim else 0} rows, expected n_rf={layer.n_rf}")
    return features(layer, x) @ W


def empirical_kernel(layer: RandomFeatureLayer, x, x2) -> float:
    return float(features(layer, x) @ features(layer, x2))


@dataclass(frozen=True)
class DeepEmulatorConfig:
    """Blueprint of a stacked random-feature emulator.

    ``layers`` is an ordered list of ``(hidden_dim, KernelParams)``; the last
    hidden_dim is the emulator output dimension.
    """

    layers: tuple
    concat_input: bool = False

    def __post_init__(self):
        layers = tuple((int(h), k) for h, k in self.layers)
        if not layers:
            raise ConfigError("a deep emulator needs at least one layer")
        object.__setattr__(self, "layers", layers)

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0]

    def input_dims(self, d_in: int) -> list[int]:
        dims = [d_in]
        for hidden, _ in self.layers[:-1]:
            dims.append(hidden + d_in if self.concat_input else hidden)
        return dims


def stack_forward(layers: Sequence[RandomFeatureLayer], weights, inputs, concat_input: bool):
    """Batched forward through a layer stack. Returns ``(output, caches)``."""
    h = inputs
    caches = []
    for i, (layer, W) in enumerate(zip(layers, weights)):
        inp = h if (i == 0 or not concat_input) else np.concatenate(
            [h, np.broadcast_to(inputs, h.shape[:-1] + inputs.shape[-1:])], axis=-1
        )
        phi, _ = feature_map(layer, inp)
        h = phi @ W
        caches.append((inp, phi))
    return h, caches


def stack_backward(layers, weights, caches, g_out, concat_input: bool):
    """Reverse pass of :func:`stack_forward`.

    Returns ``(g_inputs, g_weights, g_log_sigma, g_log_precision)`` with one
    entry per layer in the last three lists.
    """
    n = len(layers)
    g_weights = [None] * n
    g_ls = [0.0] * n
    g_lp = [None] * n
    g_inputs = 0.0
    g_h = g_out
    for i in reversed(range(n)):
        layer, W = layers[i], weights[i]
        inp, phi = caches[i]
        g_weights[i] = np.swapaxes(phi, -1, -2) @ g_h
        g_phi = g_h @ np.swapaxes(W, -1, -2)
        g_inp, g_ls[i], g_lp[i] = feature_map_backward(layer, inp, phi, g_phi)
        if i == 0:
            g_inputs = g_inputs + g_inp
        elif concat_input:
            hid = layer.input_dim - caches[0][0].shape[-1]
            g_h = g_inp[..., :hid]
            g_inputs = g_inputs + g_inp[..., hid:]
        else:
            g_h = g_inp
    return g_inputs, g_weights, g_ls, g_lp


def check_chain(config: DeepEmulatorConfig, layers, weights, d_in: int):
    if len(layers) != len(config.layers) or len(weights) != len(config.layers):
        raise ShapeError(
            f"expected {len(config.layers)} layers and weights, "
            f"got {len(layers)} layers and {len(weights)} weights"
        )
    for i, (dim, layer, W, (hidden, _)) in enumerate(
        zip(config.input_dims(d_in), layers, weights, config.layers)
    ):
        if layer.input_dim != dim:
            raise ShapeError(f"layer {i}: input_dim {layer.input_dim} does not chain, expected {dim}")
        W = np.asarray(W)
        if W.shape[-2:] != (layer.n_rf, hidden):
            raise ShapeError(f"layer {i}: weights shape {W.shape}, expected {(layer.n_rf, hidden)}")


def deep_forward(config: DeepEmulatorConfig, layers, weights, x) -> np.ndarray:
    x = _check_vector(x, layers[0].input_dim if layers else 0)
    weights = [np.asarray(W, dtype=float) for W in weights]
    check_chain(config, layers, weights, x.shape[0])
    out, _ = stack_forward(layers, weights, x, config.concat_input)
    return out
