"""Staged stochastic-gradient ascent on the ELBO.

The default schedule has two stages with two phases each:

* 1a: emulator weight factors only (simulator data only), rate ``r``
* 1b: 1a plus sigma_z and the emulator kernel, rate ``r / 10``
* 2a: every weight factor plus q(theta), all data, rate ``r``
* 2b: everything, rate ``r / 10``

Each stage owns an RNG stream seeded from ``(seed, stage index)``; minibatch
indices and noise draws come from it in a fixed order, so a run resumed
from a checkpoint continues bit for bit.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DivergenceError, NonFiniteError
from .grad import ParamVector, block_names, elbo_value_grad, pack, unpack
from .model import CalibrationModel
from .svi import VariationalPosterior, draw_eps

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MAX_BAD_STEPS = 10

APPENDIX_PRESET = {
    "theta_mean": 0.5,
    "theta_var": 0.25,
    "sigma_y": 1e-2,
    "sigma_z": 1e-3,
    "sigma_eta": 1.0,
    "precision_eta": 20.0,
    "sigma_delta": 0.1,
    "precision_delta": 20.0,
    "sigma_layer": 1.0,
    "precision_layer": 2.0,
}


@dataclass(frozen=True)
class StageSpec:
    name: str
    trainable_mask: frozenset
    learning_rate: float
    iterations: int
    minibatch_field: int = 256
    minibatch_sim: int = 1024
    n_mc: int = 1
    # stage 1 fits the simulator runs alone
    include_field: bool = True

    def __post_init__(self):
        object.__setattr__(self, "trainable_mask", frozenset(self.trainable_mask))
        if self.iterations < 0:
            raise ConfigError(f"stage {self.name}: iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError(f"stage {self.name}: learning_rate must be > 0")
        if self.minibatch_field < 1 or self.minibatch_sim < 1 or self.n_mc < 1:
            raise ConfigError(f"stage {self.name}: batch sizes and n_mc must be >= 1")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    stage: str
    elbo: float
    kl: float
    wall_ms: int


@dataclass
class TrainState:
    params: ParamVector
    m: np.ndarray
    v: np.ndarray
    iteration: int = 0
    stage_index: int = 0
    stage_step: int = 0
    rng_state: Optional[dict] = None
    trace: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ParamVector) -> "TrainState":
        return cls(params, np.zeros(len(params)), np.zeros(len(params)))

    def copy(self) -> "TrainState":
        return replace(
            self,
            params=self.params.copy(),
            m=self.m.copy(),
            v=self.v.copy(),
            rng_state=None if self.rng_state is None else dict(self.rng_state),
            trace=list(self.trace),
        )


class CalibrationResult(NamedTuple):
    posterior: VariationalPosterior
    model: CalibrationModel
    trace: list
    state: TrainState


def _mask_blocks(model: CalibrationModel):
    names = block_names(model)
    w_eta = {n for n in names if n.startswith("w_eta.")}
    w_all = w_eta | {n for n in names if n.startswith("w_disc.")}
    eta_kernel = {n for n in names if n.startswith("eta.")}
    theta = {"theta.mean", "theta.log_std"}
    return names, w_eta, w_all, eta_kernel, theta


def default_schedule(
    model: CalibrationModel,
    learning_rate: float = 1e-2,
    iterations: int = 2000,
    minibatch_field: int = 256,
    minibatch_sim: int = 1024,
    n_mc: int = 1,
    train_hyperparameters: bool = True,
) -> list[StageSpec]:
    names, w_eta, w_all, eta_kernel, theta = _mask_blocks(model)
    hyper = {n for n in names if n.startswith(("noise.", "eta.", "disc."))}
    stage1b = w_eta | ({"noise.log_sigma_z"} | eta_kernel if train_hyperparameters else set())
    stage2b = set(names) if train_hyperparameters else set(names) - hyper
    common = dict(iterations=iterations, minibatch_field=minibatch_field, minibatch_sim=minibatch_sim, n_mc=n_mc)
    return [
        StageSpec("1a", w_eta, learning_rate, include_field=False, **common),
        StageSpec("1b", stage1b, learning_rate / 10, include_field=False, **common),
        StageSpec("2a", w_all | theta, learning_rate, **common),
        StageSpec("2b", stage2b, learning_rate / 10, **common),
    ]


def init_from_priors(model: CalibrationModel, priors: Optional[VariationalPosterior]) -> ParamVector:
    """Variational factors start equal to the priors; hyperparameters come from the model."""
    if priors is None:
        raise ConfigError("priors are required to initialise the variational posterior")
    try:
        priors.check(model)
    except ValueError as exc:
        raise ConfigError(f"priors do not fit the model: {exc}") from exc
    return pack(model, priors)


def elbo_objective(model, dataset, priors):
    """Default stage objective: (value, grad, kl) of the minibatch ELBO for one iteration."""

    def objective(params: ParamVector, spec: StageSpec, rng: np.random.Generator):
        field_idx = None
        if spec.include_field:
            field_idx = _draw_idx(rng, dataset.n, spec.minibatch_field)
        sim_idx = _draw_idx(rng, dataset.N, spec.minibatch_sim)
        eps = draw_eps(model, spec.n_mc, rng)
        res = elbo_value_grad(model, dataset, params, priors, spec.n_mc, field_idx, sim_idx, eps)
        return res.value, res.grad, res.kl

    return objective


def _draw_idx(rng, size: int, batch: int) -> np.ndarray:
    if batch >= size:
        return np.arange(size)
    return rng.choice(size, batch, replace=False)


def stage_rng(seed: int, stage_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stage_index)]))


def run_stage(
    state: TrainState,
    spec: StageSpec,
    model: CalibrationModel,
    dataset,
    seed: int,
    priors: Optional[VariationalPosterior] = None,
    objective: Optional[Callable] = None,
    stage_index: Optional[int] = None,
    checkpoint_every: int = 0,
    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
    trace_every: int = 1,
    stop_after: Optional[int] = None,
) -> TrainState:
    """Masked Adam ascent for ``spec.iterations`` steps (resuming at ``state.stage_step``).

    ``objective(params, spec, rng) -> (value, grad, kl)`` defaults to the minibatch
    ELBO. ``stop_after`` halts after that many global iterations, leaving the
    state resumable.
    """
    if objective is None:
        if priors is None:
            raise ConfigError("run_stage needs priors for the ELBO objective")
        objective = elbo_objective(model, dataset, priors)
    if stage_index is None:
        stage_index = state.stage_index
    unknown = spec.trainable_mask - set(state.params.layout)
    if unknown:
        raise ConfigError(f"stage {spec.name}: unknown parameter blocks {sorted(unknown)}")
    state = state.copy()
    if state.stage_step == 0:
        state.m[:] = 0.0
        state.v[:] = 0.0
        rng = stage_rng(seed, stage_index)
    else:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
    idx = state.params.indices(sorted(spec.trainable_mask))
    b1, b2 = ADAM_BETAS
    bad = 0
    last_value = None
    while state.stage_step < spec.iterations:
        if stop_after is not None and state.iteration >= stop_after:
            break
        t0 = time.perf_counter()
        try:
            # non-finite results are counted below, so numpy's warnings are noise here
            with np.errstate(all="ignore"):
                value, grad, kl = objective(state.params, spec, rng)
            finite = np.isfinite(value) and np.all(np.isfinite(grad[idx]))
        except (NonFiniteError, FloatingPointError):
            value, grad, kl, finite = float("nan"), None, float("nan"), False
        if finite:
            bad = 0
            g = grad[idx]
            t = state.stage_step + 1
            state.m[idx] = b1 * state.m[idx] + (1.0 - b1) * g
            state.v[idx] = b2 * state.v[idx] + (1.0 - b2) * (g * g)
            m_hat = state.m[idx] / (1.0 - b1**t)
            v_hat = state.v[idx] / (1.0 - b2**t)
            state.params.values[idx] += spec.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        else:
            bad += 1
        state.stage_step += 1
        state.iteration += 1
        last_value = value
        if state.stage_step % trace_every == 0 or state.stage_step == spec.iterations:
            wall = int(round((time.perf_counter() - t0) * 1000))
            state.trace.append(TraceRecord(state.iteration, spec.name, float(value), float(kl), wall))
        if bad >= MAX_BAD_STEPS:
            state.rng_state = rng.bit_generator.state
            raise DivergenceError(
                f"stage {spec.name}: non-finite ELBO for {MAX_BAD_STEPS} consecutive iterations "
                f"(last iteration {state.iteration})",
                state,
            )
        state.rng_state = rng.bit_generator.state
        if checkpoint_every and on_checkpoint and state.iteration % checkpoint_every == 0:
            on_checkpoint(state.copy())
    state.rng_state = rng.bit_generator.state
    if last_value is not None:
        log.debug("stage %s finished at iteration %d, elbo %.4g", spec.name, state.iteration, last_value)
    return state


def calibrate(
    model: CalibrationModel,
    dataset,
    schedule: list[StageSpec],
    seed: int,
    priors: Optional[VariationalPosterior] = None,
    state: Optional[TrainState] = None,
    checkpoint_every: int = 0,
    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
    trace_every: int = 1,
    stop_after: Optional[int] = None,
) -> CalibrationResult:
    """Initialise from the priors (or resume ``state``) and run every stage in order."""
    if state is None:
        state = TrainState.fresh(init_from_priors(model, priors))
    while state.stage_index < len(schedule):
        spec = schedule[state.stage_index]
        state = run_stage(
            state, spec, model, dataset, seed, priors=priors,
            stage_index=state.stage_index, checkpoint_every=checkpoint_every,
            on_checkpoint=on_checkpoint, trace_every=trace_every, stop_after=stop_after,
        )
        if state.stage_step < spec.iterations:
            break
        state.stage_index += 1
        state.stage_step = 0
        state.rng_state = None
    fitted, posterior = unpack(model, state.params)
    return CalibrationResult(posterior, fitted, state.trace, state)
