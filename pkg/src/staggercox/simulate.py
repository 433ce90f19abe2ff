"""Synthetic staggered-adoption survival data.

Event times are drawn by inverting the piecewise cumulative hazard

    H(t) = Lambda(t) e^{eta0}                                   t <= a
    H(t) = Lambda(a) e^{eta0} + (Lambda(t) - Lambda(a)) e^{eta0 + tau}   t > a

so the post-adoption hazard is the treated hazard evaluated at calendar
time ``t`` rather than at ``t - a``.

Randomness comes from a Philox counter-based generator. Subject ``i`` of a
run with seed ``s`` always reads the same block of uniforms, whichever
slice of subjects is generated, so chunked or parallel generation
reproduces a serial run bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .core import Dataset

__all__ = [
    "HazardSpec",
    "SimConfig",
    "default_spec",
    "scaled_sigmoid",
    "default_eta0",
    "default_tau",
    "default_adoption_rate",
    "subject_uniforms",
    "sample_event_time",
    "sample_adoption_time",
    "sample_censoring",
    "generate",
    "generate_covariates",
    "true_adoption_cdf",
    "true_event_time_propensity",
]

DRAWS_PER_SUBJECT = 8
_U_X = slice(0, 3)
_U_ADOPT, _U_EVENT, _U_CENSOR = 3, 4, 5
_TINY = np.finfo(float).tiny


def scaled_sigmoid(x):
    return 2.0 / (1.0 + np.exp(-12.0 * (np.asarray(x, dtype=float) - 0.5)))


def default_eta0(X):
    """Control log relative hazard ``-0.5 * sig(x1) * sig(x2)``."""
    X = np.atleast_2d(X)
    return -0.5 * scaled_sigmoid(X[:, 0]) * scaled_sigmoid(X[:, 1])


def default_tau(X):
    X = np.atleast_2d(X)
    return X[:, 0] + X[:, 1] + X[:, 2]


def default_adoption_rate(X):
    """Unclamped adoption rate ``x2 + x3``."""
    X = np.atleast_2d(X)
    return X[:, 1] + X[:, 2]


def _half_square(t):
    return 0.5 * np.square(t)


def _half_square_inv(h):
    return np.sqrt(2.0 * h)


@dataclass(frozen=True)
class HazardSpec:
    """Generative model ``h(t | a, x) = lambda(t) exp(eta0(x) + 1(a <= t) tau(x))``.

    ``cumhaz`` must be zero at zero, strictly increasing and unbounded, with
    ``cumhaz_inv`` its inverse. Adoption times are exponential with rate
    ``max(adoption_rate(x), rate_floor)``; censoring is
    ``min(admin_censor_time, Exp(censor_rate))``.
    """

    cumhaz: Callable = _half_square
    cumhaz_inv: Callable = _half_square_inv
    eta0: Callable = default_eta0
    tau: Callable = default_tau
    adoption_rate: Callable = default_adoption_rate
    rate_floor: float = 0.05
    censor_rate: float = 0.1
    admin_censor_time: float = 20.0

    def __post_init__(self):
        if not self.admin_censor_time > 0:
            raise ValueError("admin_censor_time must be positive")
        if not self.rate_floor > 0:
            raise ValueError("rate_floor must be positive")

    def clamped_rate(self, X) -> np.ndarray:
        return np.maximum(self.adoption_rate(X), self.rate_floor)


def default_spec(**overrides) -> HazardSpec:
    return replace(HazardSpec(), **overrides)


@dataclass(frozen=True)
class SimConfig:
    n: int
    seed: int = 0
    p: int = 3
    spec: HazardSpec = field(default_factory=HazardSpec)
    misspecify_propensity: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.p < 3:
            raise ValueError("the default design needs p >= 3")


def subject_uniforms(seed: int, start: int, count: int, k: int = DRAWS_PER_SUBJECT) -> np.ndarray:
    """Uniform(0, 1) block of shape ``(count, k)`` for subjects ``start..start+count-1``.

    Row ``i`` depends only on ``(seed, start + i)``.
    """
    if k % 4:
        raise ValueError("k must be a multiple of 4 (Philox emits 4 words per counter)")
    bg = np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    bg = bg.advance(start * k // 4)
    u = np.random.Generator(bg).random((count, k))
    # open interval keeps -log(u) and ndtri finite
    return np.clip(u, _TINY, 1.0 - 2 ** -53)


def sample_event_time(x, a, spec: HazardSpec, u) -> np.ndarray:
    """Invert the piecewise cumulative hazard at ``-log(u)``.

    ``x`` is ``(n, p)`` (or one covariate vector), ``a`` the adoption times
    (``inf`` allowed) and ``u`` uniform draws in ``(0, 1)``.
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), (X.shape[0],))
    u = np.broadcast_to(np.asarray(u, dtype=float), (X.shape[0],))
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie in (0, 1)")
    target = -np.log(u)
    eta0 = spec.eta0(X)
    tau = spec.tau(X)
    with np.errstate(invalid="ignore", over="ignore"):
        lam_a = np.where(np.isinf(a), np.inf, spec.cumhaz(np.where(np.isinf(a), 0.0, a)))
        budget = lam_a * np.exp(eta0)
        before = target <= budget
        t_before = spec.cumhaz_inv(target * np.exp(-eta0))
        lam_a_fin = np.where(before, 0.0, lam_a)
        rest = np.where(before, 0.0, target - budget)
        t_after = spec.cumhaz_inv(lam_a_fin + rest * np.exp(-eta0 - tau))
    T = np.where(before, t_before, t_after)
    if not np.all(np.isfinite(T)):
        raise ValueError("cumulative hazard target outside the invertible range")
    return T


def sample_adoption_time(x, spec: HazardSpec, u) -> np.ndarray:
    """Exponential adoption time with rate ``max(adoption_rate(x), rate_floor)``."""
    rate = spec.clamped_rate(np.atleast_2d(x))
    return -np.log(np.asarray(u, dtype=float)) / rate


def sample_censoring(spec: HazardSpec, u) -> np.ndarray:
    """``min(admin_censor_time, Exp(censor_rate))`` by inversion."""
    raw = -np.log(np.asarray(u, dtype=float)) / spec.censor_rate
    return np.minimum(spec.admin_censor_time, raw)


def generate_covariates(n: int, seed: int, start: int = 0) -> np.ndarray:
    """The ``N(0, I_3)`` covariates that :func:`generate` would produce."""
    return ndtri(subject_uniforms(seed, start, n)[:, _U_X])


def generate(config: SimConfig, start: int = 0):
    """Draw ``config.n`` subjects (indices ``start`` onward).

    Returns
    -------
    data : Dataset
    truth : dict
        ``tau`` and ``eta0`` evaluated at each subject's covariates, plus the
        latent ``event_time`` and ``censor_time``.
    """
    spec = config.spec
    u = subject_uniforms(config.seed, start, config.n)
    X = ndtri(u[:, _U_X])
    if config.p > 3:
        # extra noise covariates come from an independent key
        extra = subject_uniforms(config.seed ^ 0x5DEECE66D, start, config.n,
                                 k=4 * -(-(config.p - 3) // 4))
        X = np.hstack([X, ndtri(extra[:, : config.p - 3])])
    A = sample_adoption_time(X, spec, u[:, _U_ADOPT])
    T = sample_event_time(X, A, spec, u[:, _U_EVENT])
    C = sample_censoring(spec, u[:, _U_CENSOR])
    U = np.minimum(T, C)
    event = T <= C
    ids = np.arange(start + 1, start + config.n + 1)
    names = tuple(f"x{j + 1}" for j in range(config.p))
    data = Dataset(ids, X, A, U, event, names)
    truth = {"id": ids, "tau": spec.tau(X), "eta0": spec.eta0(X),
             "event_time": T, "censor_time": C}
    return data, truth


def true_adoption_cdf(spec: HazardSpec, X, t) -> np.ndarray:
    """``P(A <= t | X)`` under the simulator's adoption law; broadcasts ``t``."""
    rate = spec.clamped_rate(np.atleast_2d(X))
    t = np.asarray(t, dtype=float)
    return -np.expm1(-np.multiply.outer(t, rate)) if t.ndim else -np.expm1(-rate * t)


def true_event_time_propensity(spec: HazardSpec, X, times, nodes: int = 12) -> np.ndarray:
    """``P(W(t) = 1 | T = t, X)``: the treated fraction among subjects failing at ``t``.

    This is the propensity that makes the second-stage score exactly
    orthogonal to the propensity. Among subjects still at risk at ``t`` the
    treated share is ``p1 = P(A < t, T >= t | X) / P(T >= t | X)``; weighting
    by the hazard ratio gives ``p1 e^tau / (p1 e^tau + 1 - p1)``. Censoring
    is independent of ``(A, T)`` and cancels. The integral over adoption
    times uses Gauss-Legendre quadrature with ``nodes`` points.

    Returns an array of shape ``(len(times), rows(X))``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(times, dtype=float).reshape(-1, 1)
    rate = spec.clamped_rate(X)[None, :]
    base = np.exp(spec.eta0(X))[None, :]
    hr = np.exp(spec.tau(X))[None, :]
    Lt = spec.cumhaz(t)
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    treated = np.zeros((t.shape[0], X.shape[0]))
    for z, w in zip(xg, wg):
        a = 0.5 * t * (z + 1.0)
        La = spec.cumhaz(a)
        surv = np.exp(-base * (La + hr * (Lt - La)))
        treated += 0.5 * t * w * rate * np.exp(-rate * a) * surv
    untreated = np.exp(-rate * t - base * Lt)
    with np.errstate(invalid="ignore"):
        p1 = np.where(treated + untreated > 0, treated / (treated + untreated), 1.0)
    return p1 * hr / (p1 * hr + 1.0 - p1)
