"""File formats shared by the command line and the library.

Tasks are CSV files with columns ``step, time, u, <channel>...`` (empty cells
are missing observations) plus a cohort manifest JSON listing ids,
covariates and file names.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .mtl import MtlModel, PosteriorSamples
from .pdmodel import BasisConfig, Task
from .pkmodel import ConcentrationSeries


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def _num(text: str):
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na"):
        return math.nan
    return float(text)


def write_task_csv(task: Task, path, sidecar: bool = True) -> None:
    """Write ``t, u, <channels>, mask_<channels>`` rows; masked values are left empty.

    ``t`` is the grid time in minutes. With ``sidecar`` a ``.json`` file
    next to the CSV records id, grid spacing, covariates and metadata.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "u", *task.channels, *[f"mask_{c}" for c in task.channels]])
        for i in range(task.T):
            row = [repr(float((i + 1) * task.dt)), repr(float(task.u[i]))]
            row += ["" if task.missing[i, j] else repr(float(task.y[i, j])) for j in range(task.d)]
            row += [int(task.missing[i, j]) for j in range(task.d)]
            writer.writerow(row)
    if sidecar:
        meta = {"id": task.id, "dt": task.dt, "channels": list(task.channels), "covariates": task.covariates,
                "meta": task.meta}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))


def read_task_csv(path, task_id: str | None = None, dt: float | None = None, covariates=None, meta=None) -> Task:
    """Read one task, using its JSON sidecar when present.

    Mask columns are optional; without them an empty cell means missing.
    ``dt`` defaults to the sidecar value, else the spacing of ``t``.
    """
    path = Path(path)
    side = path.with_suffix(".json")
    if side.exists():
        try:
            info = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{side}:{exc.lineno}: {exc.msg}") from None
        task_id = task_id or info.get("id")
        dt = dt if dt is not None else info.get("dt")
        covariates = covariates if covariates is not None else info.get("covariates")
        meta = meta if meta is not None else info.get("meta")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if header[:2] != ["t", "u"] or len(header) < 3:
            raise FormatError(f"{path}:1: header must start with t,u and name at least one channel")
        channels = [h for h in header[2:] if not h.startswith("mask_")]
        masks = [h for h in header[2:] if h.startswith("mask_")]
        if masks and masks != [f"mask_{c}" for c in channels]:
            raise FormatError(f"{path}:1: mask columns must match the channel columns in order")
        d = len(channels)
        times, u, y, flags = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            try:
                values = [_num(c) for c in row]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(values[0]) and math.isfinite(values[1])):
                raise FormatError(f"{path}:{lineno}: t and u must be present")
            if masks and any(v not in (0.0, 1.0) for v in values[2 + d:]):
                raise FormatError(f"{path}:{lineno}: mask entries must be 0 or 1")
            times.append(values[0])
            u.append(values[1])
            y.append(values[2:2 + d])
            flags.append(values[2 + d:] if masks else [math.nan] * d)
    if not u:
        raise FormatError(f"{path}: no data rows")
    if dt is None:
        dt = float(np.median(np.diff(times))) if len(times) > 1 else float(times[0])
    y = np.asarray(y, dtype=float)
    missing = np.isnan(y)
    if masks:
        missing |= np.asarray(flags) == 1.0
    return Task(id=task_id or path.stem, u=np.asarray(u), y=np.where(missing, np.nan, y), missing=missing,
                dt=float(dt), covariates=covariates, channels=channels, meta=dict(meta or {}))


def write_concentration_csv(series: ConcentrationSeries, path) -> None:
    """Write ``t, c1`` rows at ``dt, 2 dt, ...``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "c1"])
        for t, c in zip(series.times, series.values):
            writer.writerow([repr(float(t)), repr(float(c))])


def read_concentration_csv(path) -> ConcentrationSeries:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["t", "c1"]:
        raise FormatError(f"{path}:1: header must be t,c1")
    times, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 fields, found {len(row)}")
        try:
            times.append(float(row[0]))
            values.append(float(row[1]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not values:
        raise FormatError(f"{path}: no data rows")
    dt = times[0]
    if not np.allclose(times, dt * np.arange(1, len(times) + 1), rtol=1e-9):
        raise FormatError(f"{path}: times must be dt, 2 dt, ...")
    return ConcentrationSeries(dt=dt, values=np.asarray(values))


MANIFEST = "cohort.json"


def write_cohort(tasks: Sequence[Task], directory, extra: dict | None = None) -> Path:
    """Write every task CSV and sidecar plus the cohort manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for task in tasks:
        name = f"{task.id}.csv"
        write_task_csv(task, directory / name)
        entries.append({"id": task.id, "file": name})
    manifest = {"tasks": entries, **(extra or {})}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_cohort(path) -> list[Task]:
    """Read tasks from a manifest file, or from a directory holding one (else every ``*.csv``)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data path {path} does not exist")
    if path.is_dir():
        if (path / MANIFEST).exists():
            path = path / MANIFEST
        else:
            files = sorted(path.glob("*.csv"))
            if not files:
                raise FormatError(f"{path}: no task files")
            return [read_task_csv(f) for f in files]
    if path.suffix == ".csv":
        return [read_task_csv(path)]
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if "tasks" not in manifest:
        raise FormatError(f"{path}: manifest has no 'tasks' list")
    return [read_task_csv(path.parent / entry["file"], entry.get("id")) for entry in manifest["tasks"]]


# -- models ----------------------------------------------------------------


def model_to_dict(model: MtlModel) -> dict:
    return {
        "k": model.k, "p": model.p, "L": model.L,
        "psi": model.psi.tolist(), "offset": model.offset.tolist(), "basis": model.basis.to_json_dict(),
        "tau": np.asarray(model.tau).tolist(), "d": model.d, "alpha_mode": model.alpha_mode,
        "kind": model.kind, "alpha_prior_sd": model.alpha_prior_sd, "lag": model.lag,
        "covariate_standardization": model.covariate_standardization, "meta": model.meta,
        "layout": model.layout.to_json_dict(),
    }


def model_from_dict(data: dict) -> MtlModel:
    tau = data["tau"]
    return MtlModel(psi=np.asarray(data["psi"], float), offset=np.asarray(data["offset"], float),
                    basis=BasisConfig.from_json_dict(data["basis"]),
                    tau=float(tau) if np.ndim(tau) == 0 else np.asarray(tau, float), d=int(data["d"]),
                    alpha_mode=data.get("alpha_mode", "free-per-task"), kind=data.get("kind", "mtl"),
                    alpha_prior_sd=float(data.get("alpha_prior_sd", 100.0)), lag=bool(data.get("lag", False)),
                    covariate_standardization=data.get("covariate_standardization"), meta=data.get("meta", {}))


def save_model(model: MtlModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


def load_model(path) -> MtlModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} does not exist")
    try:
        return model_from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: not a model file ({exc})") from None


def write_codes(ids: Sequence[str], Z: np.ndarray, path) -> None:
    Z = np.asarray(Z, float).reshape(len(ids), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", *[f"z{j + 1}" for j in range(Z.shape[1])]])
        for tid, row in zip(ids, Z):
            writer.writerow([tid, *[repr(float(v)) for v in row]])


def read_codes(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = [r[0] for r in rows[1:]]
    Z = np.asarray([[float(v) for v in r[1:]] for r in rows[1:]], float).reshape(len(ids), len(rows[0]) - 1)
    return ids, Z


# -- posteriors and predictions ---------------------------------------------


def write_posterior(post: PosteriorSamples, csv_path, json_path) -> None:
    """One CSV row per draw (sampled coordinates, then any offsets) plus diagnostics JSON."""
    dim = post.samples.shape[1]
    names = [f"x{j + 1}" for j in range(dim)]
    cols = [post.samples]
    if post.alpha is not None:
        names += [f"alpha{j + 1}" for j in range(post.alpha.shape[1])]
        cols.append(post.alpha)
    data = np.hstack(cols) if cols else np.zeros((post.M, 0))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["draw", *names])
        for m, row in enumerate(data):
            writer.writerow([m, *[repr(float(v)) for v in row]])
    meta = {"variant": post.variant, "dim": dim, "has_alpha": post.alpha is not None,
            "fixed_z": None if post.fixed_z is None else np.asarray(post.fixed_z).tolist(),
            "diagnostics": post.diagnostics}
    Path(json_path).write_text(json.dumps(_finite_or_null(meta), indent=2, default=_json_default, allow_nan=False))


def read_posterior(csv_path, json_path) -> PosteriorSamples:
    meta = json.loads(Path(json_path).read_text())
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.asarray([[float(v) for v in r[1:]] for r in rows[1:]], float).reshape(len(rows) - 1, -1)
    dim = meta["dim"]
    alpha = data[:, dim:] if meta["has_alpha"] else None
    fixed = meta.get("fixed_z")
    return PosteriorSamples(samples=data[:, :dim], variant=meta["variant"], alpha=alpha,
                            fixed_z=None if fixed is None else np.asarray(fixed, float),
                            diagnostics=meta.get("diagnostics", {}))


def write_prediction_csv(rows: Sequence[dict], path) -> None:
    fields = ["t", "channel", "horizon", "mean", "lo", "hi", "y_observed"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _finite_or_null(obj):
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite_or_null(obj.tolist())
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return None
    return obj


def dump_json(data, path) -> None:
    """Write JSON with non-finite numbers stored as ``null``."""
    Path(path).write_text(json.dumps(_finite_or_null(data), indent=2, sort_keys=True, default=_json_default,
                                     allow_nan=False))
