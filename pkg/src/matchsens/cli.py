"""Command-line interface.

Subcommands ``fit``, ``boundary``, ``calibrate``, ``simulate`` and
``study``. Results go to files that are written once, atomically, after
all computation; each run also writes a ``manifest.json`` listing its
inputs, parameters, seed, outputs, tool version and timing.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .calibration import (
    dominance_analysis,
    expand_weighted,
    generalized_dominance_propensity,
    pratt_importance,
)
from .em import em_fit
from .errors import DataError, MatchSensError, NumericalError
from .inference import (
    BootConfig,
    block_bootstrap_ci,
    boundary_search,
    default_delta_grid,
    is_significant,
    write_boundary_csv,
)
from .model import MatchedDataset, Schema, SensitivityParams, load_dataset, standardize, write_dataset
from .sim import PRESETS, DgpConfig, full_match, preset, run_study, simulate_dataset

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


# ------------------------------------------------------------------ helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


class _Outputs:
    """Collects output files and writes them atomically at the end."""

    def __init__(self):
        self.files: dict[Path, str] = {}

    def add(self, path: Path, text: str) -> None:
        self.files[Path(path)] = text

    def commit(self, manifest_path: Path, manifest: dict) -> None:
        manifest = dict(manifest, outputs=sorted(str(p) for p in self.files))
        for path, text in [*self.files.items(), (manifest_path, _dumps(manifest))]:
            _atomic_write(path, text)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(command: str, args, inputs: Sequence[str], parameters: dict, started: float
              ) -> dict:
    return {
        "command": command,
        "version": __version__,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "parameters": parameters,
        "seed": getattr(args, "seed", None),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
    }


def _schema(args) -> Schema:
    binary = {name: True for name in args.binary or []}
    binary.update({name: False for name in args.continuous or []})
    return Schema(outcome=args.outcome, treatment=args.treatment, set=args.set, id=args.id,
                  binary=binary)


def _load(args) -> MatchedDataset:
    ds = load_dataset(args.data, _schema(args))
    return ds if args.raw else standardize(ds)


def _triples(args) -> list[SensitivityParams]:
    ps, ls, ds = args.p or [0.5], args.lam or [0.0], args.delta or [0.0]
    n = max(len(ps), len(ls), len(ds))
    for name, vals in (("--p", ps), ("--lambda", ls), ("--delta", ds)):
        if len(vals) not in (1, n):
            raise DataError(f"{name} given {len(vals)} times; expected 1 or {n}")
    pick = lambda v, i: v[0] if len(v) == 1 else v[i]  # noqa: E731
    return [SensitivityParams(pick(ps, i), pick(ls, i), pick(ds, i)) for i in range(n)]


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise DataError(f"expected comma-separated numbers, got {text!r}") from None


def _meta(ds: MatchedDataset) -> list[dict]:
    return [{"name": m.name, "binary": m.binary, "original_mean": m.mean,
             "original_sd": m.sd} for m in ds.covariate_meta]


def read_config(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DataError(f"{path}: line {n}: empty key")
        out[key] = value
    return out


# ----------------------------------------------------------------- commands

def cmd_fit(args) -> int:
    started = time.time()
    ds = _load(args)
    out_dir = Path(args.out)
    outputs = _Outputs()
    rows = ["p,lambda,delta,beta_hat,ci_low,ci_high,significant,n_failed"]
    for i, sp in enumerate(_triples(args)):
        fit = em_fit(ds, sp, tol=args.tol, max_iter=args.max_iter)
        est = block_bootstrap_ci(ds, sp, args.boot, args.level, args.seed, fit=fit,
                                 tol=args.tol, max_iter=args.max_iter, n_jobs=args.jobs)
        doc = {"sensitivity": {"p": sp.p, "lambda": sp.lam, "delta": sp.delta},
               "fit": fit.to_dict(), "interval": est.to_dict(),
               "significant": is_significant(est), "covariates": _meta(ds)}
        outputs.add(out_dir / f"fit_{i + 1:03d}.json", _dumps(doc))
        rows.append(",".join([repr(sp.p), repr(sp.lam), repr(sp.delta), repr(est.beta_hat),
                              repr(est.ci_low), repr(est.ci_high),
                              str(is_significant(est)).lower(), str(est.n_failed)]))
    outputs.add(out_dir / "intervals.csv", "\n".join(rows) + "\n")
    params = {"triples": [[sp.p, sp.lam, sp.delta] for sp in _triples(args)],
              "n_boot": args.boot, "level": args.level, "tol": args.tol,
              "max_iter": args.max_iter, "standardized": not args.raw}
    outputs.commit(out_dir / "manifest.json",
                   _manifest("fit", args, [args.data], params, started))
    return EXIT_OK


def cmd_boundary(args) -> int:
    started = time.time()
    ds = _load(args)
    d_max, d_tol = default_delta_grid(ds)
    delta_max = d_max if args.delta_max is None else args.delta_max
    tol = d_tol if args.tol_delta is None else args.tol_delta
    grid = _floats(args.lambda_grid)
    boot = BootConfig(n_boot=args.boot, level=args.level, seed=args.seed, tol=args.tol,
                      max_iter=args.max_iter)
    points = boundary_search(ds, args.p, grid, delta_max, tol, boot, n_jobs=args.jobs)
    buf = io.StringIO()
    write_boundary_csv(points, ds.covariate_names, buf)
    out = Path(args.out)
    outputs = _Outputs()
    outputs.add(out, buf.getvalue())
    failures = [{"lambda": pt.lam, "error": pt.error} for pt in points if pt.status == "failed"]
    params = {"p": args.p, "lambda_grid": grid, "delta_max": delta_max, "tol_delta": tol,
              "n_boot": args.boot, "level": args.level, "failures": failures,
              "standardized": not args.raw}
    outputs.commit(out.with_name(out.stem + ".manifest.json"),
                   _manifest("boundary", args, [args.data], params, started))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    started = time.time()
    ds = _load(args)
    sp = SensitivityParams(args.p, args.lam, args.delta)
    init = None
    inputs = [args.data]
    if args.fit:
        from .model import ModelParams

        doc = json.loads(Path(args.fit).read_text(encoding="utf-8"))
        f = doc.get("fit", doc)
        try:
            init = ModelParams(kappa0=f["kappa0"], kappa=f["kappa"], psi=f["psi"],
                               set_effects=f["set_effects"], sigma=f["sigma"], beta=f["beta"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"{args.fit}: not a fit result ({exc})") from None
        if "sensitivity" in doc:
            s = doc["sensitivity"]
            sp = SensitivityParams(s["p"], s["lambda"], s["delta"])
        inputs.append(args.fit)
    fit = em_fit(ds, sp, init=init, tol=args.tol, max_iter=args.max_iter)
    ex = expand_weighted(ds, fit)
    outcome_vars = args.vars.split(",") if args.vars else None
    prop_vars = args.propensity_vars.split(",") if args.propensity_vars else None
    tables = {
        "pratt": pratt_importance(ex, outcome_vars),
        "dominance": dominance_analysis(ex, outcome_vars),
        "generalized_dominance": generalized_dominance_propensity(ex, prop_vars),
    }
    out_dir = Path(args.out)
    outputs = _Outputs()
    totals = {}
    for name, table in tables.items():
        buf = io.StringIO()
        table.write_csv(buf)
        outputs.add(out_dir / f"{name}.csv", buf.getvalue())
        totals[name] = {"total": table.total, "excluded_subsets": [list(s) for s in table.excluded]}
    params = {"p": sp.p, "lambda": sp.lam, "delta": sp.delta, "tables": totals,
              "standardized": not args.raw}
    outputs.commit(out_dir / "manifest.json",
                   _manifest("calibrate", args, inputs, params, started))
    return EXIT_OK


def _dgp(args) -> tuple[DgpConfig, tuple]:
    if args.preset:
        cfg, grid = preset(args.preset, args.seed)
    else:
        cfg, grid = replace(DgpConfig(), seed=args.seed), PRESETS["linear-s1"][1]
    values = read_config(args.config) if args.config else {}
    for item in args.set_values or []:
        if "=" not in item:
            raise DataError(f"--set-value expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    values.pop("seed", None)
    return DgpConfig.from_mapping(values, cfg), grid


def cmd_simulate(args) -> int:
    started = time.time()
    cfg, _ = _dgp(args)
    data = simulate_dataset(cfg)
    out = Path(args.out)
    buf = io.StringIO()
    if args.unmatched:
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["set", "z", "y", *data.covariate_names])
        for i in range(data.n_subjects):
            w.writerow([int(data.stratum[i]), int(data.z[i]), repr(float(data.y[i])),
                        *(repr(float(v)) for v in data.X[i])])
    else:
        write_dataset(full_match(data), buf)
    outputs = _Outputs()
    outputs.add(out, buf.getvalue())
    outputs.commit(out.with_name(out.stem + ".manifest.json"),
                   _manifest("simulate", args, [args.config] if args.config else [],
                             {"config": cfg.to_dict(), "matched": not args.unmatched},
                             started))
    return EXIT_OK


def cmd_study(args) -> int:
    started = time.time()
    cfg, grid = _dgp(args)
    if args.grid:
        grid = []
        for pair in args.grid.split(","):
            try:
                lam, delta = (float(v) for v in pair.split(":"))
            except ValueError:
                raise DataError(f"--grid expects lam:delta pairs, got {pair!r}") from None
            grid.append((lam, delta))
    boot = BootConfig(n_boot=args.boot, level=args.level, tol=args.tol, max_iter=args.max_iter)

    def progress(done, total):
        if args.verbose:
            print(f"replicate {done}/{total}", file=sys.stderr, flush=True)

    report = run_study(cfg, grid, args.reps, boot, fit_p=args.fit_p, n_jobs=args.jobs,
                       progress=progress)
    out_dir = Path(args.out)
    outputs = _Outputs()
    outputs.add(out_dir / "report.json", _dumps(report.to_dict()))
    buf = io.StringIO()
    report.write_power_csv(buf)
    outputs.add(out_dir / "power.csv", buf.getvalue())
    params = {"config": cfg.to_dict(), "grid": [list(g) for g in report.grid],
              "n_reps": args.reps, "n_boot": args.boot, "level": args.level,
              "fit_p": report.fit_p}
    outputs.commit(out_dir / "manifest.json",
                   _manifest("study", args, [args.config] if args.config else [], params,
                             started))
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _data_args(sp):
    sp.add_argument("data", help="matched dataset (delimited text with a header row)")
    sp.add_argument("--outcome", default="y", help="outcome column (default: y)")
    sp.add_argument("--treatment", default="z", help="treatment column (default: z)")
    sp.add_argument("--set", default="set", help="matched-set column (default: set)")
    sp.add_argument("--id", default=None, help="optional subject id column")
    sp.add_argument("--binary", action="append", metavar="COL",
                    help="treat covariate COL as binary (repeatable)")
    sp.add_argument("--continuous", action="append", metavar="COL",
                    help="treat covariate COL as continuous (repeatable)")
    sp.add_argument("--raw", action="store_true",
                    help="fit on raw covariates instead of standardized ones")


def _fit_args(sp):
    sp.add_argument("--tol", type=float, default=1e-6, help="EM log-likelihood tolerance")
    sp.add_argument("--max-iter", type=int, default=1000, help="EM iteration limit")


def _boot_args(sp):
    sp.add_argument("--boot", type=int, default=500, help="bootstrap replicates")
    sp.add_argument("--level", type=float, default=0.95, help="confidence level")
    sp.add_argument("--seed", type=int, default=0, help="root random seed")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")


def _sim_args(sp):
    sp.add_argument("--preset", help=f"scenario: {', '.join(PRESETS)}")
    sp.add_argument("--config", help="key = value file overriding design fields")
    sp.add_argument("--set-value", dest="set_values", action="append", metavar="KEY=VALUE",
                    help="override one design field (repeatable)")
    sp.add_argument("--seed", type=int, default=0, help="root random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchsens",
        description="Sensitivity analysis for matched studies with a binary unmeasured "
                    "confounder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="EM fit and bootstrap interval per (p, lambda, delta)")
    _data_args(p)
    p.add_argument("--p", type=float, action="append", help="prior P(U=1) (repeatable)")
    p.add_argument("--lambda", dest="lam", type=float, action="append",
                   help="treatment log-odds shift of U (repeatable)")
    p.add_argument("--delta", type=float, action="append",
                   help="outcome shift of U (repeatable)")
    _boot_args(p)
    _fit_args(p)
    p.add_argument("--out", default="fit_out", help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("boundary", help="largest significant delta for each lambda")
    _data_args(p)
    p.add_argument("--p", type=float, default=0.5, help="prior P(U=1)")
    p.add_argument("--lambda-grid", default="0,0.5,1,1.5,2,2.5,3",
                   help="comma-separated lambda values")
    p.add_argument("--delta-max", type=float, default=None,
                   help="upper end of the delta search (default: 4 SD of the outcome)")
    p.add_argument("--tol", dest="tol_delta", type=float, default=None,
                   help="bracket width to stop at (default: 0.01 SD of the outcome)")
    _boot_args(p)
    p.add_argument("--em-tol", dest="tol", type=float, default=1e-6,
                   help="EM log-likelihood tolerance")
    p.add_argument("--max-iter", type=int, default=1000, help="EM iteration limit")
    p.add_argument("--out", default="boundary.csv", help="output CSV")
    p.set_defaults(func=cmd_boundary)

    p = sub.add_parser("calibrate", help="importance of U against observed covariates")
    _data_args(p)
    p.add_argument("--p", type=float, default=0.5, help="prior P(U=1)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="treatment log-odds shift of U")
    p.add_argument("--delta", type=float, default=0.0, help="outcome shift of U")
    p.add_argument("--fit", help="fit_*.json from `fit` to start from (sets p, lambda, delta)")
    p.add_argument("--vars", help="comma-separated outcome-model variables "
                                  "(default: covariates, U and the treatment)")
    p.add_argument("--propensity-vars", help="comma-separated treatment-model variables "
                                             "(default: covariates and U)")
    _fit_args(p)
    p.add_argument("--out", default="calibration_out", help="output directory")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="write one simulated, matched dataset")
    _sim_args(p)
    p.add_argument("--unmatched", action="store_true",
                   help="write strata as sets without matching (may violate set rules)")
    p.add_argument("--out", default="simulated.csv", help="output CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="coverage and power over simulated replicates")
    _sim_args(p)
    p.add_argument("--reps", type=int, default=200, help="simulation replicates")
    p.add_argument("--boot", type=int, default=500, help="bootstrap replicates")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--grid", help="lam:delta pairs, e.g. 0:0,2:2 (default: the preset's)")
    p.add_argument("--fit-p", type=float, default=None, help="p used for fitting")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    _fit_args(p)
    p.add_argument("--verbose", action="store_true", help="report progress on stderr")
    p.add_argument("--out", default="study_out", help="output directory")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MatchSensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
