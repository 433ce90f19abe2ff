"""Stanford heart transplant data: ingestion and analyses.

The bundled file ``data/stanford_heart.csv`` has one row per patient with
columns ``id, age, year, surgery, wait_time, futime, fustat``: age at
acceptance in years, years since the program start (1967-10-01), prior
surgery, days from acceptance to transplant (blank when no transplant),
days of follow-up and vital status. It was derived from the 172-row
counting-process version of the Crowley and Hu (1977) table by taking the
start of each patient's transplanted interval as the waiting time.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .core import Dataset, expand_dataset
from .coxtv import PartialLikelihoodProblem, newton_fit
from .estimators import HteModel, s_lasso_fit, tvcsl_fit
from .penalized import LINEAR, BasisSpec
from .propensity import fit_propensity
from .simulate import HazardSpec, sample_event_time

__all__ = [
    "HEART_COLUMNS",
    "HEART_SHA256",
    "HeartRecord",
    "CoefTable",
    "SemiSyntheticResult",
    "default_heart_path",
    "file_sha256",
    "ingest_heart",
    "write_heart_csv",
    "summary_table",
    "standardize_columns",
    "compare_fixed_vs_timevarying",
    "PseudoTruth",
    "fit_pseudo_truth",
    "simulate_semi_synthetic",
    "semi_synthetic_study",
]

HEART_COLUMNS = ("id", "age", "year", "surgery", "wait_time", "futime", "fustat")
HEART_SHA256 = "da7eb7cbb31b8b6474b9ce502056bd23580e0fb8f39cc3bbcfb9920ef98d6238"
COVARIATES = ("age", "surgery", "year")
# Follow-up closed 2375 days after the program start; a patient accepted
# ``year`` years in can be followed for at most this many days less that.
CLOSING_DAY = 2375.0
DAYS_PER_YEAR = 365.25
# Times are in days, so the adoption-rate clamp must sit well below the
# observed transplant rate of roughly 0.007 per day.
HEART_RATE_FLOOR = 1e-5


@dataclass(frozen=True)
class HeartRecord:
    id: int
    age: float
    year: float
    surgery: int
    wait_time: float | None
    futime: float
    fustat: int

    def __post_init__(self):
        if not self.futime > 0:
            raise ValueError(f"patient {self.id}: futime must be positive")
        if self.surgery not in (0, 1) or self.fustat not in (0, 1):
            raise ValueError(f"patient {self.id}: surgery and fustat must be 0 or 1")


def default_heart_path() -> Path:
    return Path(str(resources.files("staggercox") / "data" / "stanford_heart.csv"))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _parse_float(text: str, what: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"{where}: {what} {text!r} is not a number") from None


def read_heart_records(path: str | Path) -> list[HeartRecord]:
    """Parse the heart CSV, reporting malformed rows by line number."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        missing = [c for c in HEART_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: missing column(s) {missing}")
        pos = {c: header.index(c) for c in HEART_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise ValueError(f"{where}: expected {len(header)} fields, got {len(row)}")
            get = {c: row[pos[c]].strip() for c in HEART_COLUMNS}
            wait = get["wait_time"]
            try:
                rec = HeartRecord(
                    id=int(get["id"]),
                    age=_parse_float(get["age"], "age", where),
                    year=_parse_float(get["year"], "year", where),
                    surgery=int(get["surgery"]),
                    wait_time=None if wait in ("", "NA", "nan") else _parse_float(wait, "wait_time", where),
                    futime=_parse_float(get["futime"], "futime", where),
                    fustat=int(get["fustat"]),
                )
            except ValueError as exc:
                msg = str(exc)
                raise ValueError(msg if msg.startswith(where) else f"{where}: {msg}") from None
            records.append(rec)
    return records


def ingest_heart(path: str | Path | None = None, verify_checksum: bool = False) -> Dataset:
    """Load heart records as a :class:`Dataset` with covariates ``age, surgery, year``.

    ``wait_time`` becomes the adoption time (missing means never
    transplanted), ``futime`` the observed time and ``fustat`` the event
    flag. A transplant recorded at or after the end of follow-up was never
    realised and is set to ``inf`` with a warning.
    """
    path = default_heart_path() if path is None else Path(path)
    if verify_checksum:
        digest = file_sha256(path)
        if digest != HEART_SHA256:
            raise ValueError(f"{path}: sha256 {digest} does not match the expected {HEART_SHA256}")
    recs = read_heart_records(path)
    if not recs:
        raise ValueError(f"{path}: no records")
    A = []
    for r in recs:
        a = math.inf if r.wait_time is None else r.wait_time
        if math.isfinite(a) and a >= r.futime:
            warnings.warn(f"patient {r.id}: wait_time {a} >= futime {r.futime}; "
                          "treating as never transplanted", RuntimeWarning, stacklevel=2)
            a = math.inf
        A.append(a)
    X = np.array([[r.age, r.surgery, r.year] for r in recs], dtype=float)
    return Dataset([r.id for r in recs], X, A, [r.futime for r in recs],
                   [r.fustat for r in recs], COVARIATES)


def write_heart_csv(data: Dataset, path: str | Path) -> None:
    """Inverse of :func:`ingest_heart` for datasets with ``age, surgery, year`` columns."""
    idx = [data.column_names.index(c) for c in COVARIATES]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HEART_COLUMNS)
        for i in range(len(data)):
            age, surg, year = data.X[i, idx]
            a = data.A[i]
            w.writerow([int(data.ids[i]), repr(float(age)), repr(float(year)), int(surg),
                        "" if math.isinf(a) else repr(float(a)), repr(float(data.U[i])),
                        int(data.event[i])])


def summary_table(data: Dataset) -> list[tuple[str, float, float]]:
    """Mean and sample SD of age, surgery, year and the ever-transplanted indicator."""
    cols = {c: data.X[:, data.column_names.index(c)] for c in COVARIATES if c in data.column_names}
    cols["trt"] = np.isfinite(data.A).astype(float)
    order = ("age", "surgery", "year", "trt")
    return [(k, float(cols[k].mean()), float(cols[k].std(ddof=1))) for k in order if k in cols]


def standardize_columns(data: Dataset, names: Sequence[str] = ("age", "year")) -> Dataset:
    """Centre and scale the named covariates to mean 0 and sample SD 1."""
    X = data.X.copy()
    for c in names:
        j = data.column_names.index(c)
        X[:, j] = (X[:, j] - X[:, j].mean()) / X[:, j].std(ddof=1)
    return Dataset(data.ids, X, data.A, data.U, data.event, data.column_names)


@dataclass(frozen=True)
class CoefTable:
    terms: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    p: np.ndarray
    log_pl: float = math.nan

    def row(self, term: str) -> dict:
        i = self.terms.index(term)
        return {"term": term, "coef": float(self.coef[i]), "se": float(self.se[i]),
                "p": float(self.p[i])}

    def rows(self) -> list[dict]:
        return [self.row(t) for t in self.terms]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=("term", "coef", "se", "p"))
            w.writeheader()
            w.writerows(self.rows())


def _wald_table(terms, fit) -> CoefTable:
    z = fit.beta / fit.standard_errors
    p = 2.0 * norm.sf(np.abs(z))
    return CoefTable(tuple(terms), fit.beta, fit.standard_errors, p, fit.log_pl)


def compare_fixed_vs_timevarying(data: Dataset, standardize: bool = True) -> dict[str, CoefTable]:
    """Cox fits with transplant as a baseline indicator and as a time-varying one.

    Both models contain main effects for the covariates, a treatment term
    and the treatment-by-covariate interactions. Age and year are
    standardised first unless ``standardize`` is false. Returns the tables
    keyed ``"fixed"`` and ``"time_varying"``.
    """
    d = standardize_columns(data) if standardize else data
    names = list(d.column_names)
    terms = names + ["trt"] + [f"{c}:trt" for c in names]
    n = len(d)

    ever = np.isfinite(d.A).astype(float)
    Zf = np.column_stack([d.X, ever, ever[:, None] * d.X])
    fixed = PartialLikelihoodProblem(np.zeros(n), d.U, d.event, Zf, n_subjects=n)

    tab = expand_dataset(d)
    Xr = d.X[tab.subject]
    W = tab.treated.astype(float)
    Zt = np.column_stack([Xr, W, W[:, None] * Xr])
    tv = PartialLikelihoodProblem.from_table(tab, Zt, n_subjects=n)
    return {"fixed": _wald_table(terms, newton_fit(fixed, standard_errors=True)),
            "time_varying": _wald_table(terms, newton_fit(tv, standard_errors=True))}


# ---------------------------------------------------------------------------
# semi-synthetic study


class PiecewiseLinearCumhaz:
    """Strictly increasing piecewise-linear cumulative hazard through given knots.

    Beyond the last knot it continues with the average slope over the whole
    range. Instances are picklable so the hazard can cross process borders.
    """

    def __init__(self, t, H):
        t = np.concatenate([[0.0], np.asarray(t, dtype=float)])
        H = np.concatenate([[0.0], np.asarray(H, dtype=float)])
        if np.any(np.diff(t) <= 0) or np.any(np.diff(H) <= 0):
            raise ValueError("knots must be strictly increasing in time and value")
        self.t, self.H = t, H
        self.tail_slope = H[-1] / t[-1]

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        inside = np.interp(s, self.t, self.H)
        return np.where(s > self.t[-1], self.H[-1] + (s - self.t[-1]) * self.tail_slope, inside)

    def inverse(self, h):
        h = np.asarray(h, dtype=float)
        inside = np.interp(h, self.H, self.t)
        return np.where(h > self.H[-1], self.t[-1] + (h - self.H[-1]) / self.tail_slope, inside)


@dataclass(frozen=True)
class _Linear:
    coef: np.ndarray
    intercept: float = 0.0

    def __call__(self, X):
        return self.intercept + np.atleast_2d(X) @ self.coef


@dataclass(frozen=True)
class PseudoTruth:
    """Data-generating model fitted to the heart data.

    ``X`` is the covariate matrix (standardised age and year) shared by all
    replications, ``tau`` the effect model used as ground truth, ``eta0``
    its baseline linear predictor, ``cumhaz`` the Breslow baseline
    cumulative hazard and ``alpha`` the adoption-rate coefficients on
    ``(1, year)``.
    """

    data: Dataset
    tau: HteModel
    eta0: _Linear
    cumhaz: PiecewiseLinearCumhaz
    alpha: tuple[float, float]
    rate_floor: float
    censor_time: np.ndarray

    @property
    def tau_true(self) -> np.ndarray:
        return self.tau.predict(self.data.X)

    def hazard_spec(self) -> HazardSpec:
        return HazardSpec(cumhaz=self.cumhaz, cumhaz_inv=self.cumhaz.inverse, eta0=self.eta0,
                          tau=self.tau.predict, rate_floor=self.rate_floor)


def _breslow(problem: PartialLikelihoodProblem, lp: np.ndarray):
    """Breslow baseline cumulative hazard at the distinct event times."""
    e = np.exp(lp)
    s0 = problem._risk_sum(e)
    return problem.times, np.cumsum(problem.d / s0)


def fit_pseudo_truth(data: Dataset, seed: int = 0,
                     rate_floor: float = HEART_RATE_FLOOR) -> PseudoTruth:
    """Fit the ground-truth model for the semi-synthetic study.

    Surgery is dropped and age and year standardised. The effect model is a
    TV-CSL fit with linear outcome and effect bases and adoption modelled on
    year; ``eta0`` and the baseline hazard come from a time-varying Cox fit
    of the covariates with the fitted effect held as an offset.
    """
    raw_year = data.X[:, data.column_names.index("year")]
    d = standardize_columns(data).with_columns(
        [data.column_names.index("age"), data.column_names.index("year")])
    tau = tvcsl_fit(d, LINEAR, LINEAR, propensity_subset=[1], seed=seed, k_folds=5,
                    rate_floor=rate_floor)

    tab = expand_dataset(d)
    Xr = d.X[tab.subject]
    offset = tab.treated * tau.predict(Xr)
    prob = PartialLikelihoodProblem.from_table(tab, Xr, offsets=offset, n_subjects=len(d))
    gamma = newton_fit(prob).beta
    times, H = _breslow(prob, prob.offsets + Xr @ gamma)
    adopt = fit_propensity(d, [1], rate_floor=rate_floor, uncensored_only=False)
    censor = CLOSING_DAY - DAYS_PER_YEAR * raw_year
    return PseudoTruth(d, tau, _Linear(gamma), PiecewiseLinearCumhaz(times, H),
                       (adopt.intercept, float(adopt.theta[0])), rate_floor, censor)


def simulate_semi_synthetic(truth: PseudoTruth, seed: int) -> Dataset:
    """One replication: new adoption and event times for the original patients.

    Adoption is exponential with rate ``max(alpha0 + alpha1 * year, floor)``;
    follow-up ends at each patient's administrative closing time.
    """
    d = truth.data
    rng = np.random.default_rng(seed)
    u = rng.random((len(d), 2))
    u = np.clip(u, np.finfo(float).tiny, 1 - 2 ** -53)
    rate = np.maximum(truth.alpha[0] + truth.alpha[1] * d.X[:, 1], truth.rate_floor)
    A = -np.log(u[:, 0]) / rate
    T = sample_event_time(d.X, A, truth.hazard_spec(), u[:, 1])
    C = truth.censor_time
    U = np.minimum(T, C)
    return Dataset(d.ids, d.X, A, U, T <= C, d.column_names)


@dataclass(frozen=True)
class SemiSyntheticResult:
    """Mean squared error of each method and outcome basis against the pseudo-truth."""

    mse: dict
    per_rep: dict
    failures: dict
    reps: int
    truth: PseudoTruth = field(repr=False)

    def rows(self) -> list[dict]:
        out = []
        for (method, basis), v in sorted(self.mse.items()):
            out.append({"method": method, "eta_basis": basis, "mse": v,
                        "reps_ok": len(self.per_rep[(method, basis)]),
                        "reps_failed": len(self.failures[(method, basis)])})
        return out


def semi_synthetic_study(data: Dataset, reps: int = 25, seed: int = 0,
                         bases: Sequence[str] = ("linear", "complex"),
                         methods: Sequence[str] = ("s_lasso", "tv_csl"),
                         k_folds: int = 5) -> SemiSyntheticResult:
    """Compare S-Lasso and TV-CSL against a pseudo-truth fitted to the heart data.

    Replication ``r`` draws its times from ``seed + 1 + r``. Fits that raise
    (degenerate folds are common at this sample size) are recorded per
    method and basis and left out of the means.
    """
    truth = fit_pseudo_truth(data, seed=seed)
    tau_true = truth.tau_true
    per_rep = {(m, b): [] for m in methods for b in bases}
    failures = {(m, b): [] for m in methods for b in bases}
    for r in range(reps):
        d = simulate_semi_synthetic(truth, seed + 1 + r)
        for m in methods:
            for b in bases:
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        if m == "s_lasso":
                            model = s_lasso_fit(d, BasisSpec(b), LINEAR, k_folds=k_folds, seed=r)
                        else:
                            model = tvcsl_fit(d, BasisSpec(b), LINEAR, propensity_subset=[1],
                                              seed=r, k_folds=k_folds,
                                              rate_floor=truth.rate_floor)
                except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                    failures[(m, b)].append(f"rep {r}: {type(exc).__name__}: {exc}")
                    continue
                err = model.predict(d.X) - tau_true
                per_rep[(m, b)].append(float(np.mean(err * err)))
    mse = {k: (float(np.mean(v)) if v else math.nan) for k, v in per_rep.items()}
    return SemiSyntheticResult(mse, {k: np.array(v) for k, v in per_rep.items()}, failures,
                               reps, truth)
