"""``vcal`` command line: generate data, calibrate from a config, evaluate posteriors.

Exit codes: 0 success, 2 validation or input error, 3 numerical divergence.
``VCAL_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import (
    BoreholeProblem,
    Illustrative1DProblem,
    analytic_theta_posterior,
    borehole_eta,
    default_theta_grid,
    make_borehole_dataset,
    mse_metric,
    sample_illustrative,
    tv_distance,
)
from .config import RunConfig, load_config, model_from_config, priors_from_config, schedule_from_config
from .errors import CheckpointError, DivergenceError, VcalError
from .grad import unpack
from .io import load_checkpoint, load_dataset, load_theta_csv, save_checkpoint, save_dataset, write_table
from .model import emulator_batch, layer_seeds, standardize_outputs
from .svi import posterior_samples
from .trainer import TrainState, calibrate

log = logging.getLogger("vcal")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
PROBLEMS = ("borehole", "illustrative")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def _fail(msg: str, code: int = EXIT_INPUT) -> int:
    print(f"vcal: error: {msg}", file=sys.stderr)
    return code


# --- generate -------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.problem not in PROBLEMS:
        return _fail(f"unknown problem {args.problem!r}; valid problems: {', '.join(PROBLEMS)}")
    out = Path(args.out)
    if args.problem == "borehole":
        kw = {k: v for k, v in (("n", args.n), ("N", args.N)) if v is not None}
        problem = BoreholeProblem(seed=args.seed, **kw)
        ds = make_borehole_dataset(problem)
        theta = problem.theta_true
        meta = {"problem": "borehole", "seed": args.seed, "n": problem.n, "N": problem.N, "noise_std": problem.noise_std}
    else:
        problem = Illustrative1DProblem()
        problem = replace(problem, **{k: v for k, v in (("n", args.n), ("N", args.N)) if v is not None})
        draw = sample_illustrative(problem, args.seed)
        ds, theta = draw.dataset, draw.theta_true
        meta = {"problem": "illustrative", "seed": args.seed, "n": problem.n, "N": problem.N}
    try:
        save_dataset(out, ds, theta, meta)
    except OSError as exc:
        return _fail(f"cannot write to {out}: {exc.strerror or exc}")
    log.info("wrote %d field rows and %d simulator rows to %s", ds.n, ds.N, out)
    return EXIT_OK


# --- calibrate ------------------------------------------------------------------------------

def _write_run(out: Path, cfg: RunConfig, model, state: TrainState, extra: dict, posterior=None, n_stages=4):
    trace_rows = [[t.iteration, t.stage, t.elbo, t.kl, t.wall_ms] for t in state.trace]
    write_table(out / "trace.csv", ["iteration", "stage", "elbo", "kl", "wall_ms"], trace_rows)
    save_checkpoint(out / "checkpoint.json", state, cfg.hash(), cfg.to_dict(), layer_seeds(model), extra)
    if posterior is not None:
        # the stage streams use (seed, 0..n_stages-1); the draw stream is the next index
        ss = np.random.SeedSequence([cfg.training.seed, n_stages])
        theta = posterior_samples(posterior, cfg.training.n_posterior_samples, ss)
        header = [f"theta_{i + 1}" for i in range(theta.shape[1])]
        write_table(out / "posterior_samples.csv", header, theta.tolist())


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(cfg.io.dataset, cfg.model.d1, cfg.model.d2, cfg.model.d_out)
    extra = {"shift": [0.0] * ds.d_out, "scale": [1.0] * ds.d_out}
    if cfg.model.standardize:
        ds, shift, scale = standardize_outputs(ds)
        extra = {"shift": shift.tolist(), "scale": scale.tolist()}
    state = None
    seeds = None
    if args.resume:
        state, ckpt = load_checkpoint(args.resume)
        if ckpt["config_hash"] != cfg.hash():
            raise CheckpointError(f"checkpoint {args.resume} was written for a different config")
        seeds = ckpt["layer_seeds"]
    model = model_from_config(cfg, seeds)
    priors = priors_from_config(cfg, model)
    schedule = schedule_from_config(cfg, model)
    out = Path(cfg.io.out)

    def on_checkpoint(st):
        save_checkpoint(out / "checkpoint.json", st, cfg.hash(), cfg.to_dict(), layer_seeds(model), extra)

    try:
        res = calibrate(
            model, ds, schedule, cfg.training.seed, priors=priors, state=state,
            checkpoint_every=cfg.training.checkpoint_every, on_checkpoint=on_checkpoint,
        )
    except DivergenceError as exc:
        if exc.state is not None:
            _write_run(out, cfg, model, exc.state, extra)
        return _fail(str(exc), EXIT_DIVERGED)
    _write_run(out, cfg, model, res.state, extra, res.posterior, len(schedule))
    log.info("calibration finished after %d iterations; outputs in %s", res.state.iteration, out)
    return EXIT_OK


# --- evaluate -------------------------------------------------------------------------------

def _fitted_from_checkpoint(path):
    state, ckpt = load_checkpoint(path)
    try:
        cfg = RunConfig.from_dict(ckpt["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} carries no usable config: {exc!r}") from exc
    model = model_from_config(cfg, ckpt["layer_seeds"])
    fitted, posterior = unpack(model, state.params)
    return cfg, fitted, posterior, ckpt.get("extra", {})


def cmd_evaluate(args) -> int:
    theta = load_theta_csv(args.posterior)
    ds = load_dataset(args.dataset)
    if theta.shape[1] != ds.d2:
        return _fail(f"posterior has {theta.shape[1]} theta columns, dataset has d2={ds.d2}")
    meta_path = Path(args.dataset) / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    fitted = None
    if args.checkpoint:
        cfg, model, posterior, extra = _fitted_from_checkpoint(args.checkpoint)
        fitted = (cfg, model, posterior, extra)

    if meta.get("problem") == "borehole":
        # the simulator is only defined on the unit cube; Gaussian q leaks outside it
        eta_fn = lambda X, th: borehole_eta(X, np.clip(th, 0.0, 1.0))
    elif fitted is not None:
        cfg, model, posterior, extra = fitted
        shift, scale = np.asarray(extra.get("shift", 0.0)), np.asarray(extra.get("scale", 1.0))
        W_mean = [q.mean.reshape(1, *s) for q, s in zip(posterior.q_weights, model.weight_shapes())]

        def eta_fn(X, th):
            inputs = np.hstack([X, np.repeat(np.reshape(th, (1, -1)), X.shape[0], axis=0)])[None]
            eta, _ = emulator_batch(model, W_mean[: len(model.emulator_layers)], inputs)
            return eta[0] * scale + shift
    else:
        return _fail("mse needs a simulator: the dataset has no known problem in meta.json, pass --checkpoint")

    rows = [["n_samples", float(theta.shape[0])], ["mse", mse_metric(eta_fn, ds.X, ds.Y, theta)]]
    mean, std = theta.mean(axis=0), theta.std(axis=0, ddof=1) if theta.shape[0] > 1 else np.zeros(ds.d2)
    for i in range(ds.d2):
        rows += [[f"theta_{i + 1}_mean", float(mean[i])], [f"theta_{i + 1}_std", float(std[i])]]
    if args.truth:
        truth = load_theta_csv(args.truth)[0]
        if truth.size != ds.d2:
            return _fail(f"truth has {truth.size} entries, expected {ds.d2}")
        for i in range(ds.d2):
            rows.append([f"theta_{i + 1}_abs_error", float(abs(mean[i] - truth[i]))])
    if args.oracle:
        if fitted is None:
            return _fail("--oracle needs --checkpoint to rebuild the fitted model")
        cfg, model, _, extra = fitted
        if cfg.model.standardize:
            ds, _, _ = standardize_outputs(ds)
        priors = priors_from_config(cfg, model)
        grid = analytic_theta_posterior(model, ds, default_theta_grid(priors), priors)
        rows.append(["tv_distance", tv_distance(theta, grid)])
    out = Path(args.out) if args.out else Path(args.posterior).with_name("metrics.csv")
    write_table(out, ["metric", "value"], rows)
    for name, value in rows:
        print(f"{name},{value!r}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vcal", description="Variational calibration of computer models with random features.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a benchmark dataset (field.csv, sim.csv, truth.csv)")
    g.add_argument("--problem", required=True, help=f"one of: {', '.join(PROBLEMS)}")
    g.add_argument("--n", type=int, help="field observations")
    g.add_argument("--N", type=int, help="simulator runs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("calibrate", help="fit the variational posterior described by a config file")
    c.add_argument("--config", required=True)
    c.add_argument("--resume", help="checkpoint to continue from")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="metrics for posterior theta samples")
    e.add_argument("--posterior", required=True, help="posterior_samples.csv")
    e.add_argument("--dataset", required=True, help="directory with field.csv and sim.csv")
    e.add_argument("--truth", help="truth.csv with the true theta")
    e.add_argument("--oracle", action="store_true", help="compare with the analytic grid posterior (small problems)")
    e.add_argument("--checkpoint", help="calibration checkpoint; needed for --oracle and for datasets without a known simulator")
    e.add_argument("--out", help="metrics CSV path (default: metrics.csv next to the posterior)")
    e.set_defaults(func=cmd_evaluate)
    return p


def _thread_limit():
    raw = os.environ.get("VCAL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise VcalError(f"VCAL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise VcalError(f"VCAL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        limit = _thread_limit()
        if limit is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return args.func(args)
    except VcalError as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(f"{exc.filename or ''}: {exc.strerror or exc}")


if __name__ == "__main__":
    sys.exit(main())
