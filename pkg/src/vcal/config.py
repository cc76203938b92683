"""Run configuration: a sectioned TOML file validated into frozen dataclasses.

Layout::

    preset = "appendix_default"      # optional

    [model]    d1, d2, d_out, n_rf, discrepancy, hidden_dims, concat_input, seed, standardize
    [prior]    theta_mean, theta_var, sigma_y, sigma_z, sigma_eta, precision_eta,
               sigma_delta, precision_delta, sigma_layer, precision_layer
    [training] seed, learning_rate, iterations, minibatch_field, minibatch_sim, n_mc,
               checkpoint_every, train_hyperparameters, n_posterior_samples, stages
    [io]       dataset, out

Unknown keys and missing required keys are rejected before anything runs.
Relative paths in ``[io]`` resolve against the config file's directory.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from .errors import ConfigError
from .model import CalibrationModel, NoiseParams, build_model
from .rff import KernelParams
from .svi import VariationalPosterior, make_priors
from .trainer import APPENDIX_PRESET, StageSpec, _mask_blocks, default_schedule

PRESETS = {"appendix_default": APPENDIX_PRESET}

PRIOR_KEYS = tuple(APPENDIX_PRESET)

# block groups usable in [[training.stages]] tables
BLOCK_GROUPS = ("theta", "w_eta", "w_disc", "sigma_y", "sigma_z", "eta_kernel", "disc_kernel")


@dataclass(frozen=True)
class ModelSection:
    d1: int
    d2: int
    d_out: int = 1
    n_rf: int = 100
    discrepancy: str = "additive"
    hidden_dims: tuple = ()
    concat_input: bool = False
    seed: int = 0
    standardize: bool = False


@dataclass(frozen=True)
class PriorSection:
    theta_mean: tuple
    theta_var: tuple
    sigma_y: float
    sigma_z: float
    sigma_eta: float
    precision_eta: float
    sigma_delta: float
    precision_delta: float
    sigma_layer: float
    precision_layer: float


@dataclass(frozen=True)
class StageSection:
    name: str
    blocks: tuple
    learning_rate: float
    iterations: int
    include_field: bool = True


@dataclass(frozen=True)
class TrainingSection:
    seed: int = 0
    learning_rate: float = 1e-2
    iterations: tuple = (2000, 2000, 2000, 2000)
    minibatch_field: int = 256
    minibatch_sim: int = 1024
    n_mc: int = 1
    checkpoint_every: int = 0
    train_hyperparameters: bool = True
    n_posterior_samples: int = 5000
    stages: Optional[tuple] = None


@dataclass(frozen=True)
class IOSection:
    dataset: str
    out: str


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection
    prior: PriorSection
    training: TrainingSection
    io: IOSection
    preset: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Inverse of :meth:`to_dict` (values are trusted, e.g. read back from a checkpoint)."""
        m = dict(d["model"], hidden_dims=tuple(d["model"]["hidden_dims"]))
        p = dict(d["prior"], theta_mean=tuple(d["prior"]["theta_mean"]), theta_var=tuple(d["prior"]["theta_var"]))
        t = dict(d["training"], iterations=tuple(d["training"]["iterations"]))
        if t.get("stages") is not None:
            t["stages"] = tuple(StageSection(**dict(s, blocks=tuple(s["blocks"]))) for s in t["stages"])
        return cls(ModelSection(**m), PriorSection(**p), TrainingSection(**t), IOSection(**d["io"]), d.get("preset"))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


# --- parsing -------------------------------------------------------------------------------

def _int(v, what, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{what} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{what} must be >= {lo}, got {v}")
    return v


def _float(v, what, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{what} must be a number, got {v!r}")
    v = float(v)
    if not np.isfinite(v) or (positive and v <= 0):
        raise ConfigError(f"{what} must be {'a positive' if positive else 'a finite'} number, got {v}")
    return v


def _bool(v, what):
    if not isinstance(v, bool):
        raise ConfigError(f"{what} must be true or false, got {v!r}")
    return v


def _str(v, what):
    if not isinstance(v, str) or not v:
        raise ConfigError(f"{what} must be a non-empty string, got {v!r}")
    return v


def _vector(v, dim, what, positive=False):
    vals = v if isinstance(v, list) else [v] * dim
    if len(vals) != dim:
        raise ConfigError(f"{what} needs {dim} entries (one per theta dimension), got {len(vals)}")
    return tuple(_float(x, f"{what}[{i}]", positive) for i, x in enumerate(vals))


def _section(raw: dict, name: str, allowed, required=()):
    sec = raw.get(name)
    if sec is None:
        raise ConfigError(f"missing section [{name}]")
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    missing = [k for k in required if k not in sec]
    if missing:
        raise ConfigError(f"missing key(s) in [{name}]: {', '.join(missing)}")
    return sec


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    unknown = set(raw) - {"preset", "model", "prior", "training", "io"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    preset = raw.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; valid presets: {', '.join(PRESETS)}")
    defaults = dict(PRESETS[preset]) if preset else {}

    m = _section(raw, "model", ModelSection.__dataclass_fields__, ("d1", "d2"))
    model = ModelSection(
        d1=_int(m["d1"], "model.d1", 1),
        d2=_int(m["d2"], "model.d2", 1),
        d_out=_int(m.get("d_out", 1), "model.d_out", 1),
        n_rf=_int(m.get("n_rf", 100), "model.n_rf", 2),
        discrepancy=_str(m.get("discrepancy", "additive"), "model.discrepancy").lower(),
        hidden_dims=tuple(_int(h, "model.hidden_dims entry", 1) for h in m.get("hidden_dims", [])),
        concat_input=_bool(m.get("concat_input", False), "model.concat_input"),
        seed=_int(m.get("seed", 0), "model.seed", 0),
        standardize=_bool(m.get("standardize", False), "model.standardize"),
    )
    if model.n_rf % 2:
        raise ConfigError(f"model.n_rf must be even, got {model.n_rf}")
    if model.discrepancy not in ("additive", "general", "none"):
        raise ConfigError(f"model.discrepancy must be additive, general or none, got {model.discrepancy!r}")

    required = [k for k in PRIOR_KEYS if k not in defaults]
    p = _section(raw, "prior", PRIOR_KEYS, required) if "prior" in raw or required else {}
    pv = {**defaults, **p}
    prior = PriorSection(
        theta_mean=_vector(pv["theta_mean"], model.d2, "prior.theta_mean"),
        theta_var=_vector(pv["theta_var"], model.d2, "prior.theta_var", positive=True),
        **{k: _float(pv[k], f"prior.{k}", positive=True) for k in PRIOR_KEYS[2:]},
    )

    t = _section(raw, "training", TrainingSection.__dataclass_fields__) if "training" in raw else {}
    its = t.get("iterations", 2000)
    its = tuple(its) if isinstance(its, list) else (its,) * 4
    if len(its) != 4:
        raise ConfigError(f"training.iterations must be one integer or four (one per stage), got {len(its)}")
    stages = None
    if "stages" in t:
        if not isinstance(t["stages"], list):
            raise ConfigError("training.stages must be an array of tables")
        stages = tuple(_stage(s, i) for i, s in enumerate(t["stages"]))
    training = TrainingSection(
        seed=_int(t.get("seed", 0), "training.seed", 0),
        learning_rate=_float(t.get("learning_rate", 1e-2), "training.learning_rate", positive=True),
        iterations=tuple(_int(i, "training.iterations", 0) for i in its),
        minibatch_field=_int(t.get("minibatch_field", 256), "training.minibatch_field", 1),
        minibatch_sim=_int(t.get("minibatch_sim", 1024), "training.minibatch_sim", 1),
        n_mc=_int(t.get("n_mc", 1), "training.n_mc", 1),
        checkpoint_every=_int(t.get("checkpoint_every", 0), "training.checkpoint_every", 0),
        train_hyperparameters=_bool(t.get("train_hyperparameters", True), "training.train_hyperparameters"),
        n_posterior_samples=_int(t.get("n_posterior_samples", 5000), "training.n_posterior_samples", 1),
        stages=stages,
    )

    io = _section(raw, "io", IOSection.__dataclass_fields__, ("dataset", "out"))
    base = Path(base_dir)
    paths = IOSection(
        dataset=str(base / _str(io["dataset"], "io.dataset")),
        out=str(base / _str(io["out"], "io.out")),
    )
    return RunConfig(model, prior, training, paths, preset)


def _stage(s, i) -> StageSection:
    what = f"training.stages[{i}]"
    if not isinstance(s, dict):
        raise ConfigError(f"{what} must be a table")
    allowed = StageSection.__dataclass_fields__
    unknown = set(s) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {what}: {', '.join(sorted(unknown))}")
    missing = [k for k in ("name", "blocks", "learning_rate", "iterations") if k not in s]
    if missing:
        raise ConfigError(f"missing key(s) in {what}: {', '.join(missing)}")
    blocks = s["blocks"]
    if not isinstance(blocks, list) or any(b not in BLOCK_GROUPS for b in blocks):
        raise ConfigError(f"{what}.blocks must list groups from {', '.join(BLOCK_GROUPS)}, got {blocks!r}")
    return StageSection(
        _str(s["name"], f"{what}.name"),
        tuple(blocks),
        _float(s["learning_rate"], f"{what}.learning_rate", positive=True),
        _int(s["iterations"], f"{what}.iterations", 0),
        _bool(s.get("include_field", True), f"{what}.include_field"),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    return parse_config(raw, path.parent)


# --- building runtime objects ---------------------------------------------------------------

def model_from_config(cfg: RunConfig, layer_seeds=None) -> CalibrationModel:
    m, p = cfg.model, cfg.prior
    d_in = m.d1 + m.d2
    kernels = [KernelParams.isotropic(p.sigma_eta, p.precision_eta, d_in)] + [
        KernelParams.isotropic(p.sigma_layer, p.precision_layer, h + (d_in if m.concat_input else 0))
        for h in m.hidden_dims
    ]
    disc_width = m.d1 if m.discrepancy == "additive" else m.d_out + m.d1
    disc_kernel = None if m.discrepancy == "none" else KernelParams.isotropic(p.sigma_delta, p.precision_delta, disc_width)
    return build_model(
        m.d1, m.d2, m.d_out, n_rf=m.n_rf, discrepancy=m.discrepancy,
        emulator_kernels=kernels, hidden_dims=m.hidden_dims, concat_input=m.concat_input,
        disc_kernel=disc_kernel, noise=NoiseParams(p.sigma_y, p.sigma_z),
        seed=m.seed, layer_seeds=layer_seeds,
    )


def priors_from_config(cfg: RunConfig, model: CalibrationModel) -> VariationalPosterior:
    return make_priors(model, np.array(cfg.prior.theta_mean), np.array(cfg.prior.theta_var))


def schedule_from_config(cfg: RunConfig, model: CalibrationModel) -> list[StageSpec]:
    t = cfg.training
    common = dict(minibatch_field=t.minibatch_field, minibatch_sim=t.minibatch_sim, n_mc=t.n_mc)
    if t.stages is None:
        sched = default_schedule(
            model, learning_rate=t.learning_rate, train_hyperparameters=t.train_hyperparameters, **common
        )
        return [StageSpec(s.name, s.trainable_mask, s.learning_rate, its, s.minibatch_field, s.minibatch_sim, s.n_mc, s.include_field)
                for s, its in zip(sched, t.iterations)]
    groups = block_groups(model)
    out = []
    for s in t.stages:
        mask = set().union(*(groups[b] for b in s.blocks)) if s.blocks else set()
        out.append(StageSpec(s.name, mask, s.learning_rate, s.iterations, include_field=s.include_field, **common))
    return out


def block_groups(model: CalibrationModel) -> dict:
    names, w_eta, w_all, eta_kernel, theta = _mask_blocks(model)
    return {
        "theta": theta,
        "w_eta": w_eta,
        "w_disc": w_all - w_eta,
        "sigma_y": {"noise.log_sigma_y"},
        "sigma_z": {"noise.log_sigma_z"},
        "eta_kernel": eta_kernel,
        "disc_kernel": {n for n in names if n.startswith("disc.")},
    }
