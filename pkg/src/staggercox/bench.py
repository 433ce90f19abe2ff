"""Monte Carlo EMSE benchmark over sample sizes, estimators and specifications.

Replication ``r`` of a cell trains on ``generate(SimConfig(n, base_seed + r))``
and scores on 2000 fresh subjects drawn from an independent key, so every
replication is a pure function of ``(cell, r)`` and results do not depend on
execution order or the number of worker processes.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .estimators import HteModel, s_lasso_fit, tvcsl_fit
from .penalized import BasisSpec
from .simulate import HazardSpec, SimConfig, generate, generate_covariates

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "BenchCell",
    "BenchResult",
    "emse",
    "run_replication",
    "run_cell",
    "run_grid",
    "load_grid",
    "write_outputs",
    "CSV_COLUMNS",
]

METHODS = ("s_lasso", "tv_csl")
PROPENSITIES = ("correct", "misspecified")
MISSPECIFIED_SUBSET = (1,)  # adoption modelled on x2 alone
TEST_SIZE = 2000
MAX_FAILURE_FRACTION = 0.10
_TEST_KEY = 0x7E57_5E7
CSV_COLUMNS = ("n", "method", "eta_basis", "hte_basis", "propensity", "emse_mean",
               "emse_mc_se", "reps_ok", "reps_failed")


@dataclass(frozen=True)
class BenchCell:
    method: str
    eta_basis: str = "linear"
    hte_basis: str = "linear"
    propensity: str = "correct"
    n: int = 500
    reps: int = 25
    base_seed: int = 0
    test_size: int = TEST_SIZE

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.propensity not in PROPENSITIES:
            raise ValueError(f"propensity must be one of {PROPENSITIES}")
        for b in (self.eta_basis, self.hte_basis):
            BasisSpec(b)
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")

    @property
    def label(self) -> str:
        return f"{self.method}/{self.eta_basis}-eta/{self.hte_basis}-hte/{self.propensity}/n={self.n}"


@dataclass(frozen=True)
class BenchResult:
    cell: BenchCell
    emse_mean: float
    emse_mc_se: float
    per_rep_emse: np.ndarray
    wall_time: float
    reps_failed: int = 0
    failures: tuple = ()

    @property
    def reps_ok(self) -> int:
        return int(np.size(self.per_rep_emse))

    @property
    def ok(self) -> bool:
        return self.reps_failed <= MAX_FAILURE_FRACTION * self.cell.reps

    def interval(self, z: float = 1.96) -> tuple[float, float]:
        return self.emse_mean - z * self.emse_mc_se, self.emse_mean + z * self.emse_mc_se

    def row(self) -> dict:
        c = self.cell
        return {"n": c.n, "method": c.method, "eta_basis": c.eta_basis, "hte_basis": c.hte_basis,
                "propensity": c.propensity, "emse_mean": self.emse_mean,
                "emse_mc_se": self.emse_mc_se, "reps_ok": self.reps_ok,
                "reps_failed": self.reps_failed}


def emse(model: HteModel, test_x, tau_true) -> float:
    """Mean squared error of ``tau_hat`` against the true effect on test covariates."""
    test_x = np.atleast_2d(np.asarray(test_x, dtype=float))
    tau_true = np.asarray(tau_true, dtype=float)
    if test_x.shape[0] != tau_true.size:
        raise ValueError("test_x rows and tau_true length differ")
    r = model.predict(test_x) - tau_true
    return float(np.mean(r * r))


def fit_cell_model(cell: BenchCell, data) -> HteModel:
    eta, hte = BasisSpec(cell.eta_basis), BasisSpec(cell.hte_basis)
    if cell.method == "s_lasso":
        return s_lasso_fit(data, eta, hte, seed=0)
    subset = None if cell.propensity == "correct" else MISSPECIFIED_SUBSET
    model = tvcsl_fit(data, eta, hte, propensity_subset=subset, seed=0)
    if not model.summary.get("converged", True):
        raise RuntimeError(f"second stage did not converge: {model.summary.get('message')}")
    return model


def run_replication(cell: BenchCell, r: int, spec: HazardSpec | None = None) -> float:
    """EMSE of replication ``r``; exceptions propagate to the caller."""
    spec = spec or HazardSpec()
    seed = cell.base_seed + r
    data, _ = generate(SimConfig(n=cell.n, seed=seed, spec=spec,
                                 misspecify_propensity=cell.propensity == "misspecified"))
    Xt = generate_covariates(cell.test_size, seed ^ _TEST_KEY)
    model = fit_cell_model(cell, data)
    return emse(model, Xt, spec.tau(Xt))


def _safe_rep(args):
    cell, r = args
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            return r, run_replication(cell, r), None
        except (ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
            return r, None, f"rep {r}: {type(exc).__name__}: {exc}"


def _map(tasks: list, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [_safe_rep(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(_safe_rep, tasks))


def _aggregate(cell: BenchCell, outcomes, wall: float) -> BenchResult:
    outcomes = sorted(outcomes, key=lambda o: o[0])  # fixed reduction order
    vals = np.array([v for _, v, err in outcomes if err is None], dtype=float)
    fails = tuple(err for _, _, err in outcomes if err is not None)
    mean = float(vals.mean()) if vals.size else math.nan
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
    return BenchResult(cell, mean, se, vals, wall, len(fails), fails)


def run_cell(cell: BenchCell, threads: int = 1) -> BenchResult:
    """Run every replication of one cell.

    Failed replications are excluded from the mean and counted; the result
    reports ``ok = False`` when more than 10% of them fail.
    """
    t0 = time.perf_counter()
    out = _map([(cell, r) for r in range(cell.reps)], threads)
    return _aggregate(cell, out, time.perf_counter() - t0)


def run_grid(cells: Sequence[BenchCell], threads: int = 1, progress=None) -> list[BenchResult]:
    """Run many cells, sharing work between cells that cannot differ.

    S-Lasso ignores the propensity setting, so its misspecified cells reuse
    the replications of the matching correct-propensity cell.
    """
    canonical = {}
    for c in cells:
        key = c if c.method == "tv_csl" else BenchCell(**{**asdict(c), "propensity": "correct"})
        canonical.setdefault(key, []).append(c)
    tasks = [(k, r) for k in canonical for r in range(k.reps)]
    t0 = time.perf_counter()
    if threads <= 1:
        out = []
        for t in tasks:
            out.append(_safe_rep(t))
            if progress:
                progress(t[0], t[1])
    else:
        out = _map(tasks, threads)
    wall = time.perf_counter() - t0
    by_key: dict = {}
    for (k, _), o in zip(tasks, out):
        by_key.setdefault(k, []).append(o)
    results = {}
    for k, members in canonical.items():
        share = wall * len(by_key[k]) / max(len(tasks), 1)
        for c in members:
            results[c] = _aggregate(c, by_key[k], share)
    return [results[c] for c in cells]


def load_grid(path: str | Path, overrides: dict | None = None) -> list[BenchCell]:
    """Expand a TOML grid file into cells.

    The file holds a ``[grid]`` table whose keys ``n``, ``method``,
    ``eta_basis``, ``hte_basis`` and ``propensity`` may be scalars or lists,
    plus scalar ``reps``, ``base_seed`` and ``test_size``. ``overrides``
    replaces file values key by key.
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    g = dict(doc.get("grid", doc))
    g.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(g) - {"n", "method", "eta_basis", "hte_basis", "propensity", "reps",
                        "base_seed", "test_size"}
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")

    def as_list(v, default):
        v = default if v is None else v
        return list(v) if isinstance(v, (list, tuple)) else [v]

    cells = []
    for n in as_list(g.get("n"), [500]):
        for m in as_list(g.get("method"), list(METHODS)):
            for eb in as_list(g.get("eta_basis"), ["linear", "complex"]):
                for hb in as_list(g.get("hte_basis"), ["linear"]):
                    for pr in as_list(g.get("propensity"), ["correct"]):
                        cells.append(BenchCell(m, eb, hb, pr, int(n), int(g.get("reps", 25)),
                                               int(g.get("base_seed", 0)),
                                               int(g.get("test_size", TEST_SIZE))))
    return cells


def write_outputs(results: Iterable[BenchResult], out_dir: str | Path) -> list[Path]:
    """One CSV per figure panel (HTE basis x eta basis x propensity) plus ``summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = list(results)
    panels: dict = {}
    for res in results:
        c = res.cell
        panels.setdefault((c.hte_basis, c.eta_basis, c.propensity), []).append(res)
    written = []
    for (hb, eb, pr), rs in sorted(panels.items()):
        path = out_dir / f"panel_hte-{hb}_eta-{eb}_{pr}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for res in sorted(rs, key=lambda r: (r.cell.n, r.cell.method)):
                w.writerow(res.row())
        written.append(path)
    summary = [{**res.row(), "per_rep_emse": res.per_rep_emse.tolist(), "ok": res.ok,
                "wall_time": res.wall_time, "base_seed": res.cell.base_seed,
                "reps": res.cell.reps, "failures": list(res.failures)} for res in results]
    path = out_dir / "summary.json"
    path.write_text(json.dumps({"cells": summary}, indent=2), encoding="utf-8")
    written.append(path)
    return written
