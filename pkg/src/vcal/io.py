"""Dataset CSVs, checkpoints and atomic file writes."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, ValidationError
from .grad import ParamVector
from .model import CalibrationDataset
from .trainer import TraceRecord, TrainState

CHECKPOINT_VERSION = 1


def atomic_write(path, data: str | bytes):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    return repr(float(v))


def table_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_table(path, header, rows):
    atomic_write(path, table_text(header, rows))


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Strict numeric CSV with a mandatory header row."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path}: not UTF-8 text") from exc
    if not rows:
        raise ValidationError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    out = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path}: row {r} has {len(row)} columns, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                out[r - 2, c] = float(cell)
            except ValueError:
                raise ValidationError(f"{path}: row {r}, column {c + 1} ({header[c]}): cannot parse {cell!r}") from None
    if not np.all(np.isfinite(out)):
        r, c = np.argwhere(~np.isfinite(out))[0]
        raise ValidationError(f"{path}: row {r + 2}, column {c + 1} ({header[c]}) is not finite")
    return header, out


def _columns(header, prefix):
    cols = [i for i, h in enumerate(header) if h.startswith(prefix)]
    expect = [f"{prefix}{k + 1}" for k in range(len(cols))]
    if [header[i] for i in cols] != expect:
        raise ValidationError(f"columns with prefix {prefix!r} must be named {', '.join(expect) or prefix + '1'} in order")
    return cols


def _split_columns(path, header, groups, expected: dict):
    counted = {p: len(_columns(header, p)) for p in groups}
    for p, want in expected.items():
        if want is not None and counted[p] != want:
            total = sum(v for v in expected.values() if v is not None)
            raise ValidationError(
                f"{path}: expected {total} columns ({' + '.join(f'{v} {k[:-1]}' for k, v in expected.items())}), "
                f"found {len(header)} ({', '.join(header)})"
            )
    if sum(counted.values()) != len(header):
        extra = [h for h in header if not h.startswith(tuple(groups))]
        raise ValidationError(f"{path}: unexpected columns {extra}")
    return counted


def load_dataset(directory, d1: Optional[int] = None, d2: Optional[int] = None, d_out: Optional[int] = None) -> CalibrationDataset:
    """Read ``field.csv`` (x_*, y_*) and ``sim.csv`` (x_*, t_*, z_*) from ``directory``."""
    directory = Path(directory)
    fh, field = read_table(directory / "field.csv")
    sh, sim = read_table(directory / "sim.csv")
    fc = _split_columns(directory / "field.csv", fh, ("x_", "y_"), {"x_": d1, "y_": d_out})
    sc = _split_columns(directory / "sim.csv", sh, ("x_", "t_", "z_"), {"x_": d1, "t_": d2, "z_": d_out})
    if fc["x_"] != sc["x_"] or fc["y_"] != sc["z_"]:
        raise ValidationError("field.csv and sim.csv disagree on x or output columns")
    if field.shape[0] < 1 or sim.shape[0] < 1:
        raise ValidationError("field.csv and sim.csv need at least one data row")
    get = lambda h, a, p: a[:, _columns(h, p)]
    return CalibrationDataset(get(fh, field, "x_"), get(fh, field, "y_"), get(sh, sim, "x_"), get(sh, sim, "t_"), get(sh, sim, "z_"))


def save_dataset(directory, dataset: CalibrationDataset, theta_true=None, meta: Optional[dict] = None):
    directory = Path(directory)
    names = lambda p, k: [f"{p}{i + 1}" for i in range(k)]
    write_table(
        directory / "field.csv",
        names("x_", dataset.d1) + names("y_", dataset.d_out),
        np.hstack([dataset.X, dataset.Y]).tolist(),
    )
    write_table(
        directory / "sim.csv",
        names("x_", dataset.d1) + names("t_", dataset.d2) + names("z_", dataset.d_out),
        np.hstack([dataset.Xstar, dataset.T, dataset.Z]).tolist(),
    )
    if theta_true is not None:
        theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
        write_table(directory / "truth.csv", names("theta_", theta_true.size), [theta_true.tolist()])
    if meta is not None:
        atomic_write(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_theta_csv(path) -> np.ndarray:
    header, arr = read_table(path)
    _columns(header, "theta_")
    if len(header) != len(_columns(header, "theta_")):
        raise ValidationError(f"{path}: only theta_* columns are allowed")
    if arr.shape[0] < 1:
        raise ValidationError(f"{path}: no rows")
    return arr


# --- checkpoints ------------------------------------------------------------------------

def checkpoint_dict(state: TrainState, config_hash: str, config: dict, layer_seeds, extra: Optional[dict] = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "config": config,
        "layer_seeds": [int(s) for s in layer_seeds],
        "layout": {k: [off, list(shape)] for k, (off, shape) in state.params.layout.items()},
        "params": state.params.values.tolist(),
        "adam_m": state.m.tolist(),
        "adam_v": state.v.tolist(),
        "iteration": state.iteration,
        "stage_index": state.stage_index,
        "stage_step": state.stage_step,
        "rng_state": state.rng_state,
        "trace": [[t.iteration, t.stage, t.elbo, t.kl, t.wall_ms] for t in state.trace],
        "extra": extra or {},
    }


def dumps_checkpoint(ckpt: dict) -> str:
    return json.dumps(ckpt, sort_keys=True, allow_nan=True) + "\n"


def save_checkpoint(path, state: TrainState, config_hash: str, config: dict, layer_seeds, extra=None):
    atomic_write(path, dumps_checkpoint(checkpoint_dict(state, config_hash, config, layer_seeds, extra)))


def load_checkpoint(path) -> tuple[TrainState, dict]:
    """Return the train state and the raw checkpoint dict (config, seeds, extras)."""
    try:
        with open(path, encoding="utf-8") as fh:
            ckpt = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    version = ckpt.get("version") if isinstance(ckpt, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version!r}, this build reads version {CHECKPOINT_VERSION}; "
            "re-run calibrate with this version to regenerate it"
        )
    try:
        layout = {k: (int(off), tuple(int(s) for s in shape)) for k, (off, shape) in ckpt["layout"].items()}
        params = ParamVector(np.array(ckpt["params"], dtype=float), layout)
        state = TrainState(
            params,
            np.array(ckpt["adam_m"], dtype=float),
            np.array(ckpt["adam_v"], dtype=float),
            int(ckpt["iteration"]),
            int(ckpt["stage_index"]),
            int(ckpt["stage_step"]),
            ckpt["rng_state"],
            [TraceRecord(int(i), str(s), float(e), float(k), int(w)) for i, s, e, k, w in ckpt["trace"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is malformed: {exc!r}") from exc
    if not (len(state.params) == state.m.size == state.v.size):
        raise CheckpointError(f"checkpoint {path}: parameter and moment lengths differ")
    return state, ckpt
