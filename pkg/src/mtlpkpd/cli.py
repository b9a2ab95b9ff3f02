"""Command line entry point: ``mtlpkpd <subcommand> [options]``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
Logs go to stderr; stdout carries short progress summaries only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bench import BenchConfig, run_loo
from .inference import HmcConfig, PreprocessFlags, infer
from .io import (FormatError, dump_json, load_model, read_cohort, read_posterior, save_model, write_codes,
                 write_cohort, write_posterior, write_prediction_csv)
from .learning import TrainConfig, fit_cohort, fit_mtl, fit_task_descriptor, stl_model
from .pdmodel import DEFAULT_BASIS_DOMAIN, default_basis_target, fit_basis
from .prediction import HORIZONS, nll_upper_bound, predict, retrospective_from_summary, rmse, window_nll
from .synthetic import CohortSpec, generate_cohort

log = logging.getLogger("mtlpkpd")

DATA_ENV = "MTLPKPD_DATA_DIR"


class UsageError(Exception):
    pass


def _data_dir() -> str:
    return os.environ.get(DATA_ENV, "data")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _add_hmc(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--chains", type=_positive_int, default=2)
    g.add_argument("--samples", type=_positive_int, default=3000, help="total kept draws across chains")
    g.add_argument("--thin", type=_positive_int, default=2)
    g.add_argument("--warmup", type=int, default=1000)
    g.add_argument("--leapfrog", type=_positive_int, default=32)
    g.add_argument("--map-restarts", type=int, default=8, help="extra random MAP starts for latent-code posteriors")
    g.add_argument("--discard", type=int, default=16, help="initial grid points ignored by inference")
    g.add_argument("--downsample", type=_positive_int, default=4)


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--k", type=_positive_int, default=2)
    g.add_argument("--epochs", type=_positive_int, default=2000)
    g.add_argument("--lr", type=float, default=1e-2)
    g.add_argument("--patience", type=_positive_int, default=20, help="held-out evaluations without improvement")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlpkpd", description="Multi-task PK/PD drug-response modelling")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values; command-line flags win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n", type=_positive_int, default=40, help="number of tasks")
    p.add_argument("--k", type=_positive_int, default=2, help="true latent dimension")
    p.add_argument("--L", type=_positive_int, default=8)
    p.add_argument("--t-min", type=int, default=108, help="shortest series (grid points)")
    p.add_argument("--t-max", type=int, default=200)
    p.add_argument("--noise", type=_float_list, default=(4.0, 3.0, 5.0), help="per-channel noise sd, comma separated")
    p.add_argument("--psi-scale", type=float, default=0.5)
    p.add_argument("--psi-support", choices=("structured", "dense"), default="structured")
    p.add_argument("--covariates", choices=("noise", "informative"), default="noise")
    p.add_argument("--missing", type=float, default=0.05, help="fraction of missing entries")

    p = sub.add_parser("fit", parents=[common], help="train a model on a cohort")
    p.add_argument("--data", help="cohort manifest or directory")
    p.add_argument("--model-kind", choices=("mtl", "cohort", "task-d", "stl"), default="mtl")
    _add_train(p)

    p = sub.add_parser("infer", parents=[common], help="posterior for one task prefix")
    p.add_argument("--data")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True, help="task id")
    p.add_argument("--t", type=int, required=True, help="prefix length in grid points")
    _add_hmc(p)

    p = sub.add_parser("predict", parents=[common], help="forecast from a stored posterior")
    p.add_argument("--data")
    p.add_argument("--model", required=True)
    p.add_argument("--posterior", required=True, help="posterior CSV (its .json sidecar is read too)")
    p.add_argument("--task", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--horizons", type=_int_list, default=HORIZONS)
    p.add_argument("--level", type=float, default=0.9)
    p.add_argument("--mode", choices=("function", "observation"), default="function")

    p = sub.add_parser("bench", parents=[common], help="leave-one-out benchmark")
    p.add_argument("--data")
    p.add_argument("--models", default="cohort,mtl-2,stl,task-d")
    p.add_argument("--times", type=_float_list, default=tuple(range(6, 35, 2)), help="evaluation minutes")
    p.add_argument("--horizons", type=_int_list, default=HORIZONS)
    p.add_argument("--folds", type=_int_list, default=None, help="restrict to these held-out indices")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--no-oracle", action="store_true")
    _add_train(p)
    _add_hmc(p)

    p = sub.add_parser("fit-basis", parents=[common], help="fit the sigmoid basis to the reference curve")
    p.add_argument("--L", type=_positive_int, default=8)
    p.add_argument("--domain", type=_float_list, default=DEFAULT_BASIS_DOMAIN)
    return parser


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        parser.error(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _config_hash(args) -> str:
    payload = json.dumps({k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)},
                         sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()


def write_manifest(out: Path, args, extra=None) -> None:
    manifest = {
        "command": args.command,
        "config": {k: v for k, v in vars(args).items()},
        "config_hash": _config_hash(args),
        "seed": args.seed,
        "versions": {"mtlpkpd": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        **(extra or {}),
    }
    dump_json(manifest, out / "manifest.json")


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise RuntimeError(f"output directory {out} is not writable")
    return out


def _tasks(args):
    return read_cohort(args.data or _data_dir())


def _find(tasks, task_id):
    for t in tasks:
        if t.id == task_id:
            return t
    raise RuntimeError(f"task {task_id!r} not found")


def _hmc(args) -> HmcConfig:
    return HmcConfig(chains=args.chains, n_samples=args.samples, thin=args.thin, warmup=args.warmup,
                     n_leapfrog=args.leapfrog, map_restarts=args.map_restarts, seed=args.seed)


def _train(args) -> TrainConfig:
    return TrainConfig(k=args.k, max_epochs=args.epochs, lr=args.lr, early_stop_patience=args.patience,
                       seed=args.seed)


def cmd_simulate(args):
    if args.t_min > args.t_max:
        raise UsageError("--t-min must not exceed --t-max")
    spec = CohortSpec(n_tasks=args.n, k_true=args.k, L=args.L, T_range=(args.t_min, args.t_max),
                      noise_sd=args.noise, psi_scale=args.psi_scale, psi_support=args.psi_support,
                      covariates=args.covariates, missing_fraction=args.missing, seed=args.seed)
    tasks, truth = generate_cohort(spec)
    out = _out(args, _data_dir())
    write_cohort(tasks, out)
    dump_json(truth.to_json_dict(), out / "truth.json")
    write_manifest(out, args)
    print(f"wrote {len(tasks)} tasks to {out}")


def cmd_fit(args):
    tasks = _tasks(args)
    cfg = _train(args)
    out = _out(args, "fit")
    if args.model_kind in ("cohort", "stl"):
        model, report = fit_cohort(tasks, replace(cfg, k=0))
        Z = np.zeros((len(tasks), 0))
        if args.model_kind == "stl":
            model = stl_model(model, tasks)
    elif args.model_kind == "task-d":
        model, Z, report = fit_task_descriptor(tasks, cfg)
    else:
        model, Z, report = fit_mtl(tasks, cfg)
    save_model(model, out / "model.json")
    write_codes([t.id for t in tasks], Z, out / "codes.csv")
    dump_json(report.to_json_dict(), out / "fit_report.json")
    write_manifest(out, args)
    print(f"{args.model_kind} fit: objective {report.objective:.3f} after {report.epochs} epochs")


def cmd_infer(args):
    model = load_model(args.model)
    task = _find(_tasks(args), args.task)
    flags = PreprocessFlags(downsample=args.downsample, discard=args.discard)
    post = infer(model, task, args.t, config=_hmc(args), flags=flags)
    out = _out(args, "infer")
    write_posterior(post, out / "posterior.csv", out / "posterior.json")
    write_manifest(out, args)
    ess = post.diagnostics.get("ess") or [float("nan")]
    print(f"{post.M} draws, min ESS {min(ess):.1f}")


def cmd_predict(args):
    model = load_model(args.model)
    task = _find(_tasks(args), args.task)
    csv_path = Path(args.posterior)
    post = read_posterior(csv_path, csv_path.with_suffix(".json"))
    out = _out(args, "predict")
    rows, metrics = [], {}
    r_max = min(max(args.horizons), task.T - args.t)
    if r_max < 1:
        raise UsageError("no steps left after t")
    summary = predict(model, post, task, args.t, r_max, level=args.level, mode=args.mode)
    rows = summary.rows(task)
    for r in args.horizons:
        if r > r_max:
            continue
        head = summary.head(r)
        metrics[str(r)] = {"rmse": rmse(head, task).tolist(), "nll": nll_upper_bound(head, task).tolist(),
                           "nll_train_tau": window_nll(head, task).tolist()}
    metrics["retrospective_rmse"] = retrospective_from_summary(summary, task).tolist()
    write_prediction_csv(rows, out / "predictions.csv")
    dump_json({"task": task.id, "model": model.kind, "t": args.t, "channels": list(task.channels),
               "metrics": metrics}, out / "metrics.json")
    write_manifest(out, args)
    print(f"predicted {r_max} steps for {task.id} at t={args.t}")


def cmd_bench(args):
    tasks = _tasks(args)
    cfg = BenchConfig(models=tuple(m.strip() for m in args.models.split(",") if m.strip()),
                      eval_times=args.times, horizons=args.horizons, hmc=_hmc(args), train=_train(args),
                      flags=PreprocessFlags(downsample=args.downsample, discard=args.discard),
                      oracle=not args.no_oracle, seed=args.seed, jobs=args.jobs, retro_start=args.discard)
    report = run_loo(tasks, cfg, folds=args.folds)
    out = _out(args, "bench")
    dump_json(report.to_json_dict(), out / "report.json")
    report.write_csv(out / "report.csv")
    if report.oracle:
        report.write_csv(out / "oracle.csv", oracle=True)
    with open(out / "figure_rmse.csv", "w") as fh:
        fh.write("model,t,mean_rmse\n")
        for row in report.figure_rows():
            fh.write(f"{row['model']},{row['t']},{row['mean_rmse']!r}\n")
    write_manifest(out, args, {"errors": len(report.errors)})
    print(f"bench: {len(report.records)} cells, {len(report.errors)} failures")


def cmd_fit_basis(args):
    if len(args.domain) != 2 or not args.domain[0] < args.domain[1]:
        raise UsageError("--domain needs two increasing numbers")
    fit = fit_basis(default_basis_target(tuple(args.domain)), L=args.L, domain=tuple(args.domain))
    out = _out(args, ".")
    dump_json({"basis": fit.basis.to_json_dict(), "theta": np.asarray(fit.theta).tolist(),
               "max_abs_error": fit.max_abs_error, "converged": fit.converged, "domain": list(args.domain)},
              out / "basis.json")
    write_manifest(out, args)
    print(f"L={args.L} basis, max abs error {fit.max_abs_error:.3e}")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "infer": cmd_infer, "predict": cmd_predict,
            "bench": cmd_bench, "fit-basis": cmd_fit_basis}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.verbose == 0:
        warnings.simplefilter("ignore")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mtlpkpd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError, KeyError, ValueError, RuntimeError, OSError) as exc:
        print(f"mtlpkpd {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
