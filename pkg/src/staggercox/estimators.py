"""Heterogeneous log-hazard-ratio estimators for staggered adoption.

Two estimators are provided.

``s_lasso_fit``
    One lasso-penalised time-varying Cox regression on the design
    ``[phi_eta(x), W(t), W(t) * phi_tau(x)]``. The treated block gives
    ``tau_hat(x) = omega_0 + phi_tau(x)' beta``.

``tvcsl_fit``
    Two-stage cross-fitted estimator. On a training fold the adoption
    propensity ``a_t(x)`` and an S-Lasso outcome model are fitted, giving
    ``nu_t(x) = tau_hat(x) a_t(x) + eta0_hat(x)``. On the complementary fold
    the partial likelihood with event-time-indexed linear predictor

        nu_t(x_j) + (W_j(t) - a_t(x_j)) * phi(x_j)' beta

    is maximised over ``beta``. In symmetric mode both fold directions are
    summed into one objective.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Dataset, expand_dataset
from .coxtv import PartialLikelihoodProblem, SummedProblem, TimeIndexedProblem, newton_fit
from .penalized import LINEAR, BasisSpec, FittedBasis, cv_select_lambda, fit_basis
from .propensity import fit_propensity

__all__ = [
    "HteModel",
    "OutcomeModel",
    "CrossFitPlan",
    "Nuisances",
    "make_crossfit_plan",
    "fit_outcome_model",
    "s_lasso_fit",
    "second_stage_problem",
    "centering_diagnostic",
    "tvcsl_fit",
    "predict_hte",
]


@dataclass(frozen=True)
class HteModel:
    """Fitted ``tau_hat(x) = intercept + phi_tau(x)' beta``.

    ``beta`` refers to the features produced by ``hte_basis.transform``.
    """

    beta: np.ndarray
    hte_basis: FittedBasis
    intercept: float = 0.0
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        b = np.array(self.beta, dtype=float).reshape(-1)
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)
        if b.size != self.hte_basis.dim:
            raise ValueError(f"beta has {b.size} entries, basis has {self.hte_basis.dim}")

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.intercept + self.hte_basis.transform(X) @ self.beta


def predict_hte(model: HteModel, x):
    """``tau_hat`` at one covariate vector (returns a float) or at each row of a matrix."""
    x = np.asarray(x, dtype=float)
    out = model.predict(x)
    return float(out[0]) if x.ndim == 1 else out


@dataclass(frozen=True)
class OutcomeModel:
    """An S-Lasso fit: baseline log relative hazard plus the treatment effect."""

    eta_basis: FittedBasis
    gamma: np.ndarray
    hte: HteModel
    lambda_selected: float

    def eta0(self, X) -> np.ndarray:
        return self.eta_basis.transform(np.atleast_2d(X)) @ self.gamma

    def tau(self, X) -> np.ndarray:
        return self.hte.predict(X)


def _with_eta_basis(spec_or_fitted, X) -> FittedBasis:
    if isinstance(spec_or_fitted, FittedBasis):
        return spec_or_fitted
    return fit_basis(X, spec_or_fitted)


def fit_outcome_model(data: Dataset, eta_basis: BasisSpec | FittedBasis = LINEAR,
                      hte_basis: BasisSpec | FittedBasis = LINEAR, k_folds: int = 10,
                      seed: int = 0, n_lambda: int = 50) -> OutcomeModel:
    """Cross-validated lasso Cox fit of ``[phi_eta, W, W * phi_tau]``.

    Columns are scaled to unit standard deviation over episode rows before
    penalisation; the main treatment column ``W`` is unpenalised. Bases may
    be passed already fitted so several fits share knots and scaling.
    """
    if not np.any(data.A < data.U):
        raise ValueError("no subject adopts treatment before its observed time: "
                         "the treated block is identically zero and tau is not identified")
    if not data.event.any():
        raise ValueError("dataset has no events")
    fe = _with_eta_basis(eta_basis, data.X)
    ft = _with_eta_basis(hte_basis, data.X)
    tab = expand_dataset(data)
    Fe = fe.transform(data.X)[tab.subject]
    Ft = ft.transform(data.X)[tab.subject]
    W = tab.treated.astype(float)[:, None]
    Z = np.hstack([Fe, W, W * Ft])
    sd = Z.std(axis=0)
    sd[sd <= 1e-12] = 1.0
    pf = np.ones(Z.shape[1])
    pf[fe.dim] = 0.0
    problem = PartialLikelihoodProblem.from_table(tab, Z / sd, n_subjects=len(data))
    # folds keyed by subject id so the fit does not depend on row order
    path = cv_select_lambda(problem, data.ids[tab.subject], k_folds=k_folds, penalty_factor=pf,
                            n_lambda=n_lambda, seed=seed)
    coef = path.beta_selected / sd
    gamma = coef[: fe.dim]
    hte = HteModel(beta=coef[fe.dim + 1:], hte_basis=ft, intercept=float(coef[fe.dim]),
                   summary={"method": "s-lasso", "lambda": path.lambda_selected,
                            "lambda_index": path.index_selected,
                            "n_active": int(np.count_nonzero(coef[fe.dim + 1:])),
                            "eta_basis": fe.spec.kind, "hte_basis": ft.spec.kind})
    return OutcomeModel(fe, gamma, hte, path.lambda_selected)


def s_lasso_fit(data: Dataset, eta_basis: BasisSpec | FittedBasis = LINEAR,
                hte_basis: BasisSpec | FittedBasis = LINEAR, k_folds: int = 10,
                seed: int = 0) -> HteModel:
    """Single-fit S-Lasso estimate of the heterogeneous log hazard ratio."""
    return fit_outcome_model(data, eta_basis, hte_basis, k_folds=k_folds, seed=seed).hte


@dataclass(frozen=True)
class CrossFitPlan:
    """Assignment of subjects to cross-fitting folds.

    ``fold_assignment`` is aligned with the rows of the dataset the plan was
    drawn for. ``dropped_covariates`` lists binary columns removed because
    no redraw gave every fold enough minority-class subjects.
    """

    fold_assignment: np.ndarray
    n_folds: int = 2
    seed: int = 0
    dropped_covariates: tuple[int, ...] = ()

    def __post_init__(self):
        fa = np.array(self.fold_assignment, dtype=int).reshape(-1)
        fa.setflags(write=False)
        object.__setattr__(self, "fold_assignment", fa)
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if fa.size and (fa.min() < 0 or fa.max() >= self.n_folds):
            raise ValueError("fold labels must lie in 0..n_folds-1")

    def swapped(self) -> "CrossFitPlan":
        """The same partition with fold labels reversed."""
        return CrossFitPlan(self.n_folds - 1 - self.fold_assignment, self.n_folds, self.seed,
                            self.dropped_covariates)

    def validate(self, data: Dataset) -> None:
        if self.fold_assignment.size != len(data):
            raise ValueError("fold assignment does not match the dataset size")
        problems = []
        for f in range(self.n_folds):
            m = self.fold_assignment == f
            n_ev = int(data.event[m].sum())
            n_ad = int(np.sum(data.A[m] < data.U[m]))
            if n_ev == 0 or n_ad == 0:
                problems.append(f"fold {f}: {int(m.sum())} subjects, {n_ev} events, {n_ad} adoptions")
        if problems:
            raise ValueError("degenerate cross-fitting fold(s): " + "; ".join(problems))


def _binary_columns(X) -> list[int]:
    return [j for j in range(X.shape[1]) if np.unique(X[:, j]).size == 2]


def make_crossfit_plan(data: Dataset, seed: int = 0, n_folds: int = 2,
                       min_minority: int = 3, max_redraws: int = 20) -> CrossFitPlan:
    """Random balanced partition of subjects into ``n_folds`` folds.

    The assignment is a function of the sorted subject ids, so reordering
    the dataset permutes the plan along with it. Partitions leaving some fold
    with fewer than ``min_minority`` subjects in the rarer class of a binary
    covariate are redrawn; after ``max_redraws`` attempts the offending
    columns are dropped with a warning.
    """
    n = len(data)
    order = np.argsort(data.ids, kind="stable")
    rng = np.random.default_rng(seed)
    binary = _binary_columns(data.X)
    bad: set[int] = set()
    fold = None
    for _ in range(max_redraws):
        f_sorted = np.empty(n, dtype=int)
        f_sorted[rng.permutation(n)] = np.arange(n) % n_folds
        fold = np.empty(n, dtype=int)
        fold[order] = f_sorted
        bad = set()
        for j in binary:
            lo = np.unique(data.X[:, j])[0]
            for f in range(n_folds):
                col = data.X[fold == f, j]
                if min(np.sum(col == lo), np.sum(col != lo)) < min_minority:
                    bad.add(j)
        if not bad:
            break
    dropped = tuple(sorted(bad))
    if dropped:
        names = [data.column_names[j] for j in dropped]
        warnings.warn(f"binary covariate(s) {names} too rare within a fold after "
                      f"{max_redraws} draws; dropping them", RuntimeWarning, stacklevel=2)
    return CrossFitPlan(fold, n_folds, seed, dropped)


@dataclass(frozen=True)
class Nuisances:
    """Known or previously fitted nuisance functions for the second stage.

    ``propensity(X, times)`` returns the ``(len(times), n)`` matrix of
    ``a_t(x_j)``; ``eta0`` and ``tau`` map covariates to per-subject values.
    """

    propensity: Callable
    eta0: Callable
    tau: Callable


def second_stage_problem(data: Dataset, phi: np.ndarray, nuisances: Nuisances,
                         **kw) -> TimeIndexedProblem:
    """Orthogonalised partial likelihood on ``data`` with fixed nuisances."""
    X = data.X
    eta = np.asarray(nuisances.eta0(X), dtype=float)
    tau = np.asarray(nuisances.tau(X), dtype=float)
    A = data.A

    last = [None, None]  # nu and c are requested back to back for the same block

    def prop(t):
        if last[0] is None or last[0].shape != t.shape or not np.array_equal(last[0], t):
            last[0], last[1] = t.copy(), np.asarray(nuisances.propensity(X, t), dtype=float)
        return last[1]

    def nu(t):
        return eta[None, :] + tau[None, :] * prop(t)

    def c(t):
        return (A[None, :] < t[:, None]).astype(float) - prop(t)

    return TimeIndexedProblem(data.U, data.event, phi, nu, c, **kw)


def centering_diagnostic(data: Dataset, propensity: Callable) -> float:
    """Average over event times of the risk-set mean of ``W(t) - a_t(x)``.

    Near zero when the propensity is calibrated on the at-risk population;
    reported, not enforced.
    """
    times = np.unique(data.U[data.event])
    if times.size == 0:
        return float("nan")
    c = (data.A[None, :] < times[:, None]) - propensity(data.X, times)
    risk = data.U[None, :] >= times[:, None]
    return float(np.mean((c * risk).sum(axis=1) / risk.sum(axis=1)))


def _design(fb: FittedBasis, X, intercept: bool) -> np.ndarray:
    F = fb.transform(X)
    return np.hstack([np.ones((F.shape[0], 1)), F]) if intercept else F


def _fitted_nuisances(train: Dataset, eta_basis, hte_basis, subset, rate_floor,
                      k_folds, seed):
    prop = fit_propensity(train, subset, rate_floor=rate_floor)
    outcome = fit_outcome_model(train, eta_basis, hte_basis, k_folds=k_folds, seed=seed)
    return prop, outcome, Nuisances(prop.matrix, outcome.eta0, outcome.tau)


def tvcsl_fit(data: Dataset, eta_basis: BasisSpec | FittedBasis = LINEAR,
              hte_basis: BasisSpec | FittedBasis = LINEAR,
              propensity_subset: Sequence[int] | None = None,
              plan: CrossFitPlan | None = None, seed: int = 0, symmetric: bool = True,
              hte_intercept: bool = True, rate_floor: float = 0.01, k_folds: int = 10,
              nuisances: Nuisances | None = None) -> HteModel:
    """Cross-fitted two-stage TV-CSL estimate of the heterogeneous log hazard ratio.

    Parameters
    ----------
    data : Dataset
    eta_basis, hte_basis : BasisSpec or FittedBasis
        Outcome-model basis for ``eta0`` and the effect basis ``phi_tau``
        (shared by both stages).
    propensity_subset : sequence of int, optional
        Covariates entering the adoption rate; ``None`` uses all.
    plan : CrossFitPlan, optional
        Fold partition; drawn from ``seed`` when omitted.
    symmetric : bool
        Sum the second-stage objectives of both fold directions. When
        false, nuisances come from fold 0 and the second stage uses fold 1
        only.
    hte_intercept : bool
        Include a constant in ``phi`` so the effect may have a main term.
    nuisances : Nuisances, optional
        Known nuisance functions. When given, no cross-fitting takes place
        and the second stage uses every subject.

    Returns
    -------
    HteModel
        ``summary`` carries the per-fold nuisance fits and the Newton
        diagnostics (including standard errors of the second stage treating
        nuisances as fixed).
    """
    if eta_basis is None:
        eta_basis = LINEAR
    drop: tuple[int, ...] = ()
    if nuisances is None:
        if plan is None:
            plan = make_crossfit_plan(data, seed=seed)
        plan.validate(data)
        drop = plan.dropped_covariates
    keep_cols = [j for j in range(data.p) if j not in drop]
    work = data.with_columns(keep_cols) if drop else data
    fe = _with_eta_basis(eta_basis, work.X)
    ft = _with_eta_basis(hte_basis, work.X)

    summary: dict = {"method": "tv-csl", "eta_basis": fe.spec.kind, "hte_basis": ft.spec.kind,
                     "symmetric": symmetric, "dropped_covariates": list(drop)}
    if nuisances is not None:
        problems = [second_stage_problem(work, _design(ft, work.X, hte_intercept), nuisances)]
        summary["nuisances"] = "injected"
    else:
        if propensity_subset is None:
            subset = None
        else:
            remap = {j: i for i, j in enumerate(keep_cols)}
            subset = [remap[j] for j in propensity_subset if j in remap]
        directions = [(0, 1), (1, 0)] if symmetric else [(0, 1)]
        problems, folds = [], []
        for train_f, apply_f in directions:
            train = work.subset(plan.fold_assignment == train_f)
            apply = work.subset(plan.fold_assignment == apply_f)
            # the same CV seed in both directions keeps the fit symmetric in fold labels
            prop, outcome, nz = _fitted_nuisances(train, fe, ft, subset, rate_floor,
                                                  k_folds, seed)
            problems.append(second_stage_problem(apply, _design(ft, apply.X, hte_intercept), nz))
            folds.append({"train_fold": train_f, "apply_fold": apply_f,
                          "propensity_intercept": prop.intercept,
                          "propensity_theta": prop.theta.tolist(),
                          "first_stage_lambda": outcome.lambda_selected,
                          "first_stage_tau_intercept": outcome.hte.intercept,
                          "first_stage_tau_beta": outcome.hte.beta.tolist(),
                          "centering": centering_diagnostic(apply, nz.propensity)})
        summary["folds"] = folds
    objective = problems[0] if len(problems) == 1 else SummedProblem(problems)
    fit = newton_fit(objective, standard_errors=True)
    summary.update(converged=fit.converged, n_iterations=fit.n_iterations,
                   gradient_norm=fit.gradient_norm, log_pl=fit.log_pl,
                   standard_errors=fit.standard_errors.tolist(), message=fit.message)
    if not fit.converged:
        warnings.warn(f"TV-CSL second stage did not converge: {fit.message}", RuntimeWarning,
                      stacklevel=2)
    beta = fit.beta
    intercept = float(beta[0]) if hte_intercept else 0.0
    slope = beta[1:] if hte_intercept else beta
    if drop:
        ft_full, slope = _expand_dropped(ft, slope, data.p, keep_cols)
    else:
        ft_full = ft
    return HteModel(beta=slope, hte_basis=ft_full, intercept=intercept, summary=summary)


def _expand_dropped(ft: FittedBasis, slope, p: int, keep_cols):
    """Re-express a linear effect fitted without dropped columns on the full covariates."""
    if ft.spec.kind != "linear":
        raise ValueError("dropping binary covariates is only supported with a linear HTE basis")
    full = np.zeros(p)
    full[keep_cols] = slope
    return fit_basis(np.zeros((1, p)), ft.spec), full
