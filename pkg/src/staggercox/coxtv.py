"""Time-varying Cox partial likelihood and its Newton maximiser.

Two problem classes share one interface (``value``, ``gradient``,
``hessian``, ``value_grad_hess`` and ``n``):

* :class:`PartialLikelihoodProblem` works on counting-process episodes whose
  covariates and offsets are constant within each ``(start, stop]`` row.
* :class:`TimeIndexedProblem` handles linear predictors that change
  continuously with the event time, of the form
  ``lp_j(t) = nu_j(t) + c_j(t) * phi_j' beta``. Both ``nu`` and ``c`` are
  re-evaluated at every event time of the risk-set sweep.

Log partial likelihoods are normalised by the number of subjects and ties
are handled with the Breslow approximation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import EpisodeRow, EpisodeTable, FitResult

__all__ = [
    "PartialLikelihoodProblem",
    "TimeIndexedProblem",
    "SummedProblem",
    "log_partial_likelihood",
    "gradient",
    "hessian",
    "newton_fit",
    "NewtonConfig",
]

TIE_POLICIES = ("breslow",)


def _event_times(time: np.ndarray, event: np.ndarray):
    """Distinct event times and their multiplicities."""
    t, d = np.unique(time[event], return_counts=True)
    return t, d.astype(float)


class PartialLikelihoodProblem:
    """Partial likelihood over ``(start, stop]`` episode rows.

    Parameters
    ----------
    start, stop : array_like, shape (m,)
        Episode bounds, ``start < stop``.
    event : array_like of bool, shape (m,)
        Event flag of each episode.
    design : array_like, shape (m, k)
        Regression covariates ``z`` of each episode.
    offsets : array_like, shape (m,), optional
        Fixed additive term of the linear predictor.
    n_subjects : int, optional
        Normaliser of the log partial likelihood; defaults to the number
        of episodes.
    """

    def __init__(self, start, stop, event, design, offsets=None, n_subjects=None,
                 tie_policy: str = "breslow"):
        if tie_policy not in TIE_POLICIES:
            raise ValueError(f"unsupported tie policy {tie_policy!r}")
        self.start = np.asarray(start, dtype=float)
        self.stop = np.asarray(stop, dtype=float)
        self.event = np.asarray(event, dtype=bool)
        Z = np.asarray(design, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        self.design = Z
        m = self.stop.size
        if Z.shape[0] != m or self.start.size != m or self.event.size != m:
            raise ValueError("design row count must equal episode count")
        if np.any(self.start >= self.stop):
            raise ValueError("every episode needs start < stop")
        if not np.all(np.isfinite(self.stop[self.event])):
            raise ValueError("event times must be finite")
        self.offsets = np.zeros(m) if offsets is None else np.asarray(offsets, dtype=float)
        self.n = int(n_subjects) if n_subjects is not None else m
        self.tie_policy = tie_policy

        self.times, self.d = _event_times(self.stop, self.event)
        m = self.stop.size
        # descending orders: rows with stop >= t_k are the first cnt_stop[k] of stop_desc
        self._stop_desc = np.argsort(-self.stop, kind="stable")
        self._start_desc = np.argsort(-self.start, kind="stable")
        self._cnt_stop = m - np.searchsorted(np.sort(self.stop), self.times, "left")
        self._cnt_start = m - np.searchsorted(np.sort(self.start), self.times, "left")
        # event times inside (start_i, stop_i] are times[lo_i:hi_i]
        self._hi = np.searchsorted(self.times, self.stop, "right")
        self._lo = np.searchsorted(self.times, self.start, "right")
        self._ev_idx = np.flatnonzero(self.event)

    @classmethod
    def from_episodes(cls, rows: Sequence[EpisodeRow], n_subjects=None, **kw):
        if n_subjects is None:
            n_subjects = len({r.subject_id for r in rows})
        return cls([r.start for r in rows], [r.stop for r in rows], [r.event for r in rows],
                   np.vstack([np.atleast_1d(r.z) for r in rows]),
                   [r.offset for r in rows], n_subjects=n_subjects, **kw)

    @classmethod
    def from_table(cls, table: EpisodeTable, design, offsets=None, n_subjects=None, **kw):
        if n_subjects is None:
            n_subjects = np.unique(table.subject).size
        return cls(table.start, table.stop, table.event, design, offsets, n_subjects, **kw)

    @property
    def n_features(self) -> int:
        return self.design.shape[1]

    def subset_rows(self, mask) -> "PartialLikelihoodProblem":
        mask = np.asarray(mask)
        return PartialLikelihoodProblem(self.start[mask], self.stop[mask], self.event[mask],
                                        self.design[mask], self.offsets[mask],
                                        tie_policy=self.tie_policy)

    # --- risk-set sums --------------------------------------------------
    @staticmethod
    def _prefix_at(vals: np.ndarray, order: np.ndarray, cnt: np.ndarray) -> np.ndarray:
        v = vals[order]
        cs = np.empty((v.shape[0] + 1,) + v.shape[1:])
        cs[0] = 0.0
        np.cumsum(v, axis=0, out=cs[1:])
        return cs[cnt]

    def _risk_sum(self, vals: np.ndarray) -> np.ndarray:
        return (self._prefix_at(vals, self._stop_desc, self._cnt_stop)
                - self._prefix_at(vals, self._start_desc, self._cnt_start))

    def _over_risk_times(self, f: np.ndarray) -> np.ndarray:
        """For each row i, sum of ``f_k`` over event times in ``(start_i, stop_i]``."""
        cs = np.concatenate([[0.0], np.cumsum(f)])
        return cs[self._hi] - cs[self._lo]

    def linear_predictor(self, beta) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            return self.offsets + self.design @ np.asarray(beta, dtype=float)

    def _weights(self, lp: np.ndarray):
        if not np.all(np.isfinite(lp)):
            raise FloatingPointError("non-finite linear predictor; rescale the covariates")
        shift = lp.max()
        e = np.exp(lp - shift)
        s0 = self._risk_sum(e)
        if np.any(s0 <= 0) or not np.all(np.isfinite(s0)):
            raise FloatingPointError("risk-set sums underflowed; rescale the linear predictor")
        return e, s0, shift

    def value_from_lp(self, lp: np.ndarray) -> float:
        e, s0, shift = self._weights(lp)
        num = lp[self._ev_idx].sum()
        return float((num - np.sum(self.d * (np.log(s0) + shift))) / self.n)

    def value(self, beta) -> float:
        return self.value_from_lp(self.linear_predictor(beta))

    def lp_derivatives(self, lp: np.ndarray):
        """Un-normalised log-PL, its gradient and diagonal Hessian in ``lp``."""
        e, s0, shift = self._weights(lp)
        a1 = self._over_risk_times(self.d / s0)
        a2 = self._over_risk_times(self.d / s0 ** 2)
        mu = e * a1
        value = lp[self._ev_idx].sum() - np.sum(self.d * (np.log(s0) + shift))
        grad = self.event - mu
        w = mu - e * e * a2
        return float(value), grad, w

    def value_grad_hess(self, beta, need_hessian: bool = True):
        Z = self.design
        lp = self.linear_predictor(beta)
        e, s0, shift = self._weights(lp)
        value = lp[self._ev_idx].sum() - np.sum(self.d * (np.log(s0) + shift))
        # sum_k d_k zbar_k == Z' (e * a1), a1_i = sum of d_k / S0_k over i's risk times
        c = e * self._over_risk_times(self.d / s0)
        g = Z.T @ (self.event - c)
        if not need_hessian:
            return float(value / self.n), g / self.n, None
        zbar = self._risk_sum(e[:, None] * Z) / s0[:, None]
        H = (zbar * self.d[:, None]).T @ zbar - (Z * c[:, None]).T @ Z
        return float(value / self.n), g / self.n, H / self.n

    def gradient(self, beta) -> np.ndarray:
        return self.value_grad_hess(beta, need_hessian=False)[1]

    def hessian(self, beta) -> np.ndarray:
        return self.value_grad_hess(beta)[2]


class TimeIndexedProblem:
    """Partial likelihood with event-time-indexed offsets and covariates.

    Subject ``j`` is at risk at ``t`` when ``U_j >= t``. Its linear predictor
    there is ``nu(t)_j + c(t)_j * (phi @ beta)_j``. ``nu`` and ``c`` are
    callables mapping an array of ``K`` times to ``(K, n)`` matrices.

    Parameters
    ----------
    time, event : array_like, shape (n,)
        Observed times and event flags.
    phi : array_like, shape (n, q)
        Per-subject regression features.
    nu, c : callable
        ``f(t) -> (len(t), n)`` offset and covariate multiplier.
    chunk : int
        Number of event times evaluated per block.
    """

    def __init__(self, time, event, phi, nu: Callable, c: Callable, chunk: int = 512,
                 cache_limit: int = 30_000_000):
        self.time = np.asarray(time, dtype=float)
        self.event = np.asarray(event, dtype=bool)
        phi = np.asarray(phi, dtype=float)
        self.phi = phi[:, None] if phi.ndim == 1 else phi
        self.n = self.time.size
        self.times, self.d = _event_times(self.time, self.event)
        self._nu, self._c = nu, c
        self.chunk = int(chunk)
        # events at times[k]: subject indices
        ev = np.flatnonzero(self.event)
        self._ev_subj = ev
        self._ev_k = np.searchsorted(self.times, self.time[ev])
        self._cache = None
        if self.times.size * self.n <= cache_limit:
            self._cache = [(sl, self._nu(self.times[sl]), self._c(self.times[sl]))
                           for sl in self._slices()]

    @property
    def n_features(self) -> int:
        return self.phi.shape[1]

    def _slices(self):
        K = self.times.size
        for a in range(0, K, self.chunk):
            yield slice(a, min(a + self.chunk, K))

    def _blocks(self):
        if self._cache is not None:
            yield from self._cache
        else:
            for sl in self._slices():
                t = self.times[sl]
                yield sl, self._nu(t), self._c(t)

    def value_grad_hess(self, beta, need_hessian: bool = True):
        beta = np.asarray(beta, dtype=float)
        xb = self.phi @ beta
        q = self.phi.shape[1]
        value = 0.0
        g_num = np.zeros(self.n)  # coefficient of phi_j collected from numerators
        wc = np.zeros(self.n)      # sum_k d_k w_kj c_kj
        wcc = np.zeros(self.n)     # sum_k d_k w_kj c_kj^2
        MtDM = np.zeros((q, q))
        for sl, nu, c in self._blocks():
            t = self.times[sl]
            d = self.d[sl]
            lp = nu + c * xb
            at_risk = self.time[None, :] >= t[:, None]
            lpm = np.where(at_risk, lp, -np.inf)
            shift = lpm.max(axis=1)
            e = np.exp(lpm - shift[:, None])
            s0 = e.sum(axis=1)
            w = e / s0[:, None]
            # numerator contributions for events falling into this block
            sel = (self._ev_k >= sl.start) & (self._ev_k < sl.stop)
            ks, js = self._ev_k[sel] - sl.start, self._ev_subj[sel]
            value += lp[ks, js].sum() - np.sum(d * (np.log(s0) + shift))
            np.add.at(g_num, js, c[ks, js])
            wcd = w * c * d[:, None]
            wc += wcd.sum(axis=0)
            if need_hessian:
                wcc += (wcd * c).sum(axis=0)
                M = (w * c) @ self.phi
                MtDM += (M * d[:, None]).T @ M
        g = self.phi.T @ (g_num - wc)
        if not need_hessian:
            return value / self.n, g / self.n, None
        H = MtDM - (self.phi * wcc[:, None]).T @ self.phi
        return value / self.n, g / self.n, H / self.n

    def value(self, beta) -> float:
        return self.value_grad_hess(beta, need_hessian=False)[0]

    def gradient(self, beta) -> np.ndarray:
        return self.value_grad_hess(beta, need_hessian=False)[1]

    def hessian(self, beta) -> np.ndarray:
        return self.value_grad_hess(beta)[2]


class SummedProblem:
    """Sum of several partial-likelihood objectives sharing one ``beta``."""

    def __init__(self, problems: Sequence):
        self.problems = list(problems)
        self.n = sum(p.n for p in self.problems)

    @property
    def n_features(self) -> int:
        return self.problems[0].n_features

    def value_grad_hess(self, beta, need_hessian: bool = True):
        parts = [p.value_grad_hess(beta, need_hessian) for p in self.problems]
        v = sum(x[0] for x in parts)
        g = sum(x[1] for x in parts)
        H = sum(x[2] for x in parts) if need_hessian else None
        return v, g, H

    def value(self, beta) -> float:
        return self.value_grad_hess(beta, need_hessian=False)[0]

    def gradient(self, beta):
        return self.value_grad_hess(beta, need_hessian=False)[1]

    def hessian(self, beta):
        return self.value_grad_hess(beta)[2]

    def information(self, beta) -> np.ndarray:
        # each part is normalised by its own n
        return -sum(p.n * p.hessian(beta) for p in self.problems)


def log_partial_likelihood(problem, beta) -> float:
    """Normalised log partial likelihood ``(1/n) * log PL(beta)``."""
    return problem.value(beta)


def gradient(problem, beta) -> np.ndarray:
    return problem.gradient(beta)


def hessian(problem, beta) -> np.ndarray:
    return problem.hessian(beta)


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 20


def _information(problem, beta, H):
    if hasattr(problem, "information"):
        return problem.information(beta)
    return -problem.n * H


def newton_fit(problem, beta0=None, tol: float = 1e-8, max_iter: int = 100,
               standard_errors: bool = False, max_halvings: int = 20) -> FitResult:
    """Maximise the log partial likelihood by damped Newton steps.

    Converged when the change in log-PL is below ``tol`` relative to
    ``1 + |log-PL|`` and the gradient norm is below ``tol``. A singular or
    non-ascent Newton direction is replaced by the gradient for that step.
    """
    k = problem.n_features
    beta = np.zeros(k) if beta0 is None else np.array(beta0, dtype=float)
    value, g, H = problem.value_grad_hess(beta)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite log partial likelihood at the starting point")
    converged = False
    it = 0
    message = ""
    while it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(-H, g)
            if not np.all(np.isfinite(step)) or g @ step < 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = g.copy()
        s = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + s * step
            try:
                v_new = problem.value(cand)
            except FloatingPointError:
                v_new = -np.inf
            if np.isfinite(v_new) and v_new >= value - 1e-15 * (1 + abs(value)):
                break
            s *= 0.5
        else:
            message = "step-halving exhausted"
            break
        beta = cand
        v_old, value = value, v_new
        value, g, H = problem.value_grad_hess(beta)
        gnorm = float(np.linalg.norm(g))
        if abs(value - v_old) <= tol * (1 + abs(value)) and gnorm <= tol:
            converged = True
            break
    gnorm = float(np.linalg.norm(g))
    if not converged and gnorm <= tol:
        converged = True
    if not converged and not message:
        message = f"no convergence after {it} iterations"
    se = None
    if standard_errors:
        info = _information(problem, beta, H)
        try:
            se = np.sqrt(np.diag(np.linalg.inv(info)))
        except np.linalg.LinAlgError:
            se = np.full(k, np.nan)
    return FitResult(beta=beta, log_pl=float(value), n_iterations=it, converged=converged,
                     gradient_norm=gnorm, standard_errors=se, message=message)
