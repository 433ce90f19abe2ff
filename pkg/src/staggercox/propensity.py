"""Time-varying adoption propensity ``a_t(x) = P(A <= t | Delta = 1, X = x)``.

The adoption law is modelled as exponential with a rate that is linear in a
chosen subset of covariates and clamped below at ``rate_floor``:

    a_t(x) = 1 - exp(-max(intercept + theta' x_S, rate_floor) * t)

Only subjects with an observed event enter the fit. Among them, a subject
that was never seen to adopt (``A = inf``) contributes a survivor term for
adoption beyond its observed time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .core import Dataset

__all__ = ["PropensityModel", "fit_propensity", "evaluate", "MIN_ADOPTERS"]

MIN_ADOPTERS = 10


@dataclass(frozen=True)
class PropensityModel:
    """Fitted exponential-linear adoption law.

    ``covariate_subset`` indexes columns of the full covariate matrix; the
    model is always evaluated on full-width ``x``.
    """

    theta: np.ndarray
    intercept: float
    covariate_subset: tuple[int, ...]
    rate_floor: float = 0.01
    kind: str = "exponential_linear"

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "covariate_subset", tuple(int(j) for j in self.covariate_subset))
        if theta.size != len(self.covariate_subset):
            raise ValueError("theta must have one entry per covariate in the subset")
        if not self.rate_floor > 0:
            raise ValueError("rate_floor must be positive")
        if self.kind != "exponential_linear":
            raise ValueError(f"unsupported propensity family {self.kind!r}")

    def rate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lin = self.intercept + X[:, list(self.covariate_subset)] @ self.theta
        return np.maximum(lin, self.rate_floor)

    def __call__(self, X, t) -> np.ndarray:
        return evaluate(self, X, t)

    def matrix(self, X, times) -> np.ndarray:
        """``a_t(x_j)`` for every time (rows) and subject (columns)."""
        return -np.expm1(-np.multiply.outer(np.asarray(times, dtype=float), self.rate(X)))


def evaluate(model: PropensityModel, x, t):
    """Adoption probability by time ``t``.

    ``x`` may be one covariate vector or a matrix of them; ``t`` broadcasts
    against the rows. Negative ``t`` is rejected.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    x = np.asarray(x, dtype=float)
    r = model.rate(x)
    out = -np.expm1(-r * t)
    if x.ndim == 1 and out.size == 1:
        return float(out.reshape(()))
    return out


def _negloglik(params, Z, exact, time, floor):
    """Exponential log-likelihood with clamped linear rate; returns value and gradient.

    ``time`` is the adoption time when ``exact`` and the censoring time otherwise.
    """
    lin = Z @ params
    r = np.maximum(lin, floor)
    val = np.sum(r * time) - np.sum(np.log(r[exact]))
    dr = time - np.where(exact, 1.0 / r, 0.0)
    dr = np.where(lin > floor, dr, 0.0)
    return val, Z.T @ dr


def fit_propensity(data: Dataset, subset: Sequence[int] | None = None,
                   rate_floor: float = 0.01, uncensored_only: bool = True) -> PropensityModel:
    """Maximum-likelihood exponential adoption model among uncensored subjects.

    Parameters
    ----------
    data : Dataset
    subset : sequence of int, optional
        Covariate columns entering the rate. ``None`` uses all of them and
        an empty sequence fits a constant rate.
    rate_floor : float
        Lower clamp on the rate.
    uncensored_only : bool
        Condition on ``Delta = 1`` (the propensity estimand). ``False`` fits
        the marginal adoption law on every subject instead, treating
        ``A = inf`` as adoption censored at ``U``.

    Raises
    ------
    ValueError
        If fewer than ``MIN_ADOPTERS`` fitted subjects have a finite
        adoption time.
    """
    subset = tuple(range(data.p)) if subset is None else tuple(int(j) for j in subset)
    keep = data.event if uncensored_only else np.ones(len(data), dtype=bool)
    A = data.A[keep]
    U = data.U[keep]
    exact = np.isfinite(A)
    n_exact = int(exact.sum())
    if n_exact < MIN_ADOPTERS:
        raise ValueError(
            f"only {n_exact} subjects in the fit have a finite adoption time "
            f"(need {MIN_ADOPTERS}); fit a constant-rate model on pooled data instead")
    time = np.where(exact, A, U)
    Xs = data.X[keep][:, list(subset)]
    Z = np.column_stack([np.ones(A.size), Xs])

    # constant-rate MLE is the closed form events / exposure
    r0 = max(n_exact / time.sum(), 2 * rate_floor)
    starts = [np.r_[r0, np.zeros(len(subset))]]
    if subset:
        # moment start: regress 1 / A on the covariates among adopters
        inv = 1.0 / np.maximum(A[exact], 1e-12)
        coef, *_ = np.linalg.lstsq(Z[exact], np.clip(inv, 0, np.quantile(inv, 0.95)), rcond=None)
        starts.append(coef)

    best = None
    for x0 in starts:
        res = minimize(_negloglik, x0, args=(Z, exact, time, rate_floor), jac=True, method="L-BFGS-B",
                       options={"maxiter": 500, "gtol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    params = best.x
    return PropensityModel(theta=params[1:], intercept=float(params[0]),
                           covariate_subset=subset, rate_floor=rate_floor)
