"""Command-line interface: ``staggercox <subcommand> ...``.

Subcommands
-----------
simulate        draw a synthetic dataset and its ground-truth table
fit             fit S-Lasso or TV-CSL to a dataset CSV
benchmark       run a Monte Carlo EMSE grid described by a TOML file
analyze-heart   Stanford heart transplant analyses

Every run writes ``manifest.json`` next to its outputs. Exit status is 0 on
success, 2 for usage errors and 1 for failures while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

__all__ = ["main", "build_parser", "write_manifest"]

MANIFEST_NAME = "manifest.json"


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("staggercox")
    except PackageNotFoundError:  # pragma: no cover - running from a source tree
        return "0+unknown"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir: Path, argv: list[str], config: dict, seeds: dict,
                   outputs: list[Path], wall_time: float) -> Path:
    """Write (or replace) the single manifest of ``out_dir``."""
    out_dir = Path(out_dir)
    doc = {
        "command_line": list(argv),
        "seeds": seeds,
        "config": config,
        "config_hash": config_hash(config),
        "software_version": _version(),
        "wall_time_seconds": wall_time,
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors by raising instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="staggercox", description="Heterogeneous treatment effects under "
                "staggered adoption with time-varying Cox models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes for replicated work (default: all cores)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="draw a synthetic staggered-adoption dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--rate-floor", type=float, default=0.05)
    s.add_argument("--censor-rate", type=float, default=0.1)
    s.add_argument("--out", type=Path, required=True)

    f = sub.add_parser("fit", help="estimate the heterogeneous log hazard ratio")
    f.add_argument("--method", choices=("s-lasso", "tv-csl"), required=True)
    f.add_argument("--eta-basis", choices=("linear", "complex"), default="linear")
    f.add_argument("--hte-basis", choices=("linear", "complex"), default="linear")
    f.add_argument("--propensity", choices=("correct", "misspecified"), default="correct",
                   help="misspecified models adoption on the second covariate only")
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--seed", type=int, required=True)
    f.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("benchmark", help="Monte Carlo EMSE grid")
    b.add_argument("--grid", type=Path, required=True)
    b.add_argument("--out-dir", type=Path, required=True)
    b.add_argument("--reps", type=int, default=None, help="override the grid's reps")
    b.add_argument("--base-seed", type=int, default=None, help="override the grid's base_seed")

    h = sub.add_parser("analyze-heart", help="Stanford heart transplant analyses")
    h.add_argument("--data", type=Path, default=None,
                   help="heart CSV (default: the bundled copy)")
    h.add_argument("--analysis", choices=("summary", "table3", "semisynthetic"), required=True)
    h.add_argument("--reps", type=int, default=25)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--raw-scale", action="store_true",
                   help="table3: keep age and year in raw units instead of standardizing")
    h.add_argument("--out", type=Path, required=True, help="output directory")
    return p


def _basis_doc(fb) -> dict:
    return {"kind": fb.spec.kind, "spline_df": fb.spec.spline_df,
            "include_pairwise": fb.spec.include_pairwise, "names": list(fb.names),
            "knots": [list(k) for k in fb.knots],
            "mean": None if fb.mean is None else fb.mean.tolist(),
            "scale": None if fb.scale is None else fb.scale.tolist()}


def _cmd_simulate(args) -> tuple[list[Path], dict]:
    from .core import write_dataset_csv
    from .simulate import SimConfig, default_spec, generate

    if args.n < 1:
        raise _UsageError("--n must be >= 1")
    spec = default_spec(rate_floor=args.rate_floor, censor_rate=args.censor_rate)
    data, truth = generate(SimConfig(n=args.n, seed=args.seed, spec=spec))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(data, args.out)
    truth_path = args.out.with_suffix(".truth.csv")
    with open(truth_path, "w", encoding="utf-8") as fh:
        fh.write("id,tau_true,eta0_true\n")
        for i, t, e in zip(truth["id"], truth["tau"], truth["eta0"]):
            fh.write(f"{int(i)},{float(t)!r},{float(e)!r}\n")
    return [args.out, truth_path], {"seed": args.seed}


def _cmd_fit(args) -> tuple[list[Path], dict]:
    from .core import read_dataset_csv
    from .estimators import s_lasso_fit, tvcsl_fit
    from .penalized import BasisSpec

    data = read_dataset_csv(args.data)
    eta, hte = BasisSpec(args.eta_basis), BasisSpec(args.hte_basis)
    if args.method == "s-lasso":
        model = s_lasso_fit(data, eta, hte, seed=args.seed)
    else:
        if args.propensity == "misspecified" and data.p < 2:
            raise ValueError("the misspecified propensity needs at least two covariates")
        subset = None if args.propensity == "correct" else [1]
        model = tvcsl_fit(data, eta, hte, propensity_subset=subset, seed=args.seed)
    doc = {
        "method": args.method,
        "propensity": args.propensity if args.method == "tv-csl" else None,
        "n_subjects": len(data),
        "n_events": int(data.event.sum()),
        "intercept": model.intercept,
        "beta": model.beta.tolist(),
        "hte_basis": _basis_doc(model.hte_basis),
        "eta_basis": args.eta_basis,
        "diagnostics": model.summary,
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(doc, indent=2, default=_json_default), encoding="utf-8")
    return [args.out], {"seed": args.seed}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _cmd_benchmark(args, threads: int) -> tuple[list[Path], dict]:
    from .bench import load_grid, run_grid, write_outputs

    cells = load_grid(args.grid, {"reps": args.reps, "base_seed": args.base_seed})

    def progress(cell, r):
        print(f"{cell.label} rep {r + 1}/{cell.reps}", file=sys.stderr, flush=True)

    results = run_grid(cells, threads=threads, progress=progress)
    written = write_outputs(results, args.out_dir)
    bad = [r.cell.label for r in results if not r.ok]
    if bad:
        raise RuntimeError(f"more than 10% of replications failed in: {', '.join(bad)}")
    return written, {"base_seeds": sorted({c.base_seed for c in cells})}


def _cmd_heart(args) -> tuple[list[Path], dict]:
    import csv

    from .heartdata import (compare_fixed_vs_timevarying, ingest_heart, semi_synthetic_study,
                            summary_table)

    data = ingest_heart(args.data)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.analysis == "summary":
        path = out / "table1_summary.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["variable", "mean", "sd"])
            for name, m, s in summary_table(data):
                w.writerow([name, f"{m:.6g}", f"{s:.6g}"])
        written.append(path)
    elif args.analysis == "table3":
        for key, table in compare_fixed_vs_timevarying(data, standardize=not args.raw_scale).items():
            path = out / f"table3_{key}.csv"
            table.write_csv(path)
            written.append(path)
    else:
        if args.reps < 1:
            raise _UsageError("--reps must be >= 1")
        res = semi_synthetic_study(data, reps=args.reps, seed=args.seed)
        path = out / "table2_semisynthetic.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=("method", "eta_basis", "mse", "reps_ok",
                                               "reps_failed"))
            w.writeheader()
            w.writerows(res.rows())
        written.append(path)
    return written, {"seed": args.seed}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        print("staggercox: error: --threads must be >= 1", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        if args.command == "simulate":
            written, seeds = _cmd_simulate(args)
            out_dir = args.out.parent
        elif args.command == "fit":
            written, seeds = _cmd_fit(args)
            out_dir = args.out.parent
        elif args.command == "benchmark":
            written, seeds = _cmd_benchmark(args, threads)
            out_dir = args.out_dir
        else:
            written, seeds = _cmd_heart(args)
            out_dir = args.out
    except _UsageError as exc:
        print(f"staggercox {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, do not dump a traceback
        print(f"staggercox {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k != "threads"}
    write_manifest(out_dir, argv, config, seeds, written, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
