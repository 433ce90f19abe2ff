import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staggercox.core import Dataset
from staggercox.propensity import PropensityModel, evaluate, fit_propensity
from staggercox.simulate import SimConfig, generate


def _data(A, U, event, X):
    n = len(A)
    return Dataset(np.arange(1, n + 1), X, A, U, event)


def test_constant_rate_recovered():
    rng = np.random.default_rng(0)
    n = 5000
    X = rng.normal(size=(n, 2))
    A = rng.exponential(1.0, n)
    m = fit_propensity(_data(A, np.full(n, 50.0), np.ones(n, bool), X))
    assert m.intercept == pytest.approx(1.0, abs=0.05)
    np.testing.assert_allclose(m.theta, 0.0, atol=0.05)


def test_linear_rate_recovered():
    rng = np.random.default_rng(1)
    n = 20000
    X = rng.uniform(0, 1, size=(n, 2))
    rate = 0.5 + 1.0 * X[:, 0] + 0.25 * X[:, 1]
    A = rng.exponential(1 / rate)
    m = fit_propensity(_data(A, np.full(n, 100.0), np.ones(n, bool), X))
    assert m.intercept == pytest.approx(0.5, abs=0.05)
    np.testing.assert_allclose(m.theta, [1.0, 0.25], atol=0.06)


def test_never_adopters_are_censored_at_observed_time():
    rng = np.random.default_rng(2)
    n = 400
    A = rng.exponential(2.0, n)
    U = rng.uniform(0.5, 4.0, n)
    A_obs = np.where(A < U, A, np.inf)
    m = fit_propensity(_data(A_obs, U, np.ones(n, bool), rng.normal(size=(n, 1))), subset=[])
    exposure = np.minimum(A, U).sum()
    assert m.intercept == pytest.approx(np.sum(A < U) / exposure, rel=1e-6)


def test_censored_subjects_do_not_move_the_fit():
    rng = np.random.default_rng(3)
    n = 600
    X = rng.normal(size=(n, 2))
    A = rng.exponential(1.0, n)
    U = rng.uniform(1, 5, n)
    ev = rng.random(n) < 0.6
    base = fit_propensity(_data(A, U, ev, X))
    poisoned = np.where(ev, A, 1e-6)
    other = fit_propensity(_data(poisoned, U, ev, X))
    assert other.intercept == base.intercept
    np.testing.assert_array_equal(other.theta, base.theta)


def test_too_few_adopters():
    n = 30
    A = np.full(n, np.inf)
    A[:5] = 1.0
    with pytest.raises(ValueError, match="constant-rate"):
        fit_propensity(_data(A, np.full(n, 2.0), np.ones(n, bool), np.zeros((n, 1))))


def test_evaluate_examples():
    m = PropensityModel(theta=[], intercept=0.5, covariate_subset=())
    assert evaluate(m, np.zeros(2), 0.0) == 0.0
    assert evaluate(m, np.zeros(2), math.log(4) / 0.5) == pytest.approx(0.75)
    assert evaluate(m, np.zeros(2), 1e6) == 1.0
    with pytest.raises(ValueError):
        evaluate(m, np.zeros(2), -1.0)


def test_empirical_cdf_oracle():
    m = PropensityModel(theta=[0.7, -0.2], intercept=0.4, covariate_subset=(0, 2))
    x = np.array([0.5, 9.0, 1.0])
    rate = 0.4 + 0.35 - 0.2
    draws = np.random.default_rng(4).exponential(1 / rate, 1_000_000)
    grid = np.linspace(0, 8, 41)
    emp = np.searchsorted(np.sort(draws), grid, "right") / draws.size
    np.testing.assert_allclose([evaluate(m, x, t) for t in grid], emp, atol=0.005)


def test_matrix_layout():
    m = PropensityModel(theta=[1.0], intercept=0.1, covariate_subset=(1,))
    X = np.array([[0.0, 0.5], [0.0, 2.0], [0.0, -5.0]])
    M = m.matrix(X, [0.5, 1.0])
    assert M.shape == (2, 3)
    assert M[1, 2] == pytest.approx(1 - math.exp(-0.01))  # clamped rate
    np.testing.assert_allclose(M[0], evaluate(m, X, 0.5))


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.lists(st.floats(-10, 10), min_size=2, max_size=2),
       st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_monotone_and_in_range(intercept, theta, x):
    m = PropensityModel(theta=theta, intercept=intercept, covariate_subset=(0, 1))
    grid = np.linspace(0, 50, 101)
    vals = evaluate(m, np.array([x]), grid)
    assert np.all((vals >= 0) & (vals <= 1))
    assert np.all(np.diff(vals) >= 0)
    assert vals[0] == 0.0


def test_misspecified_variant_is_a_proper_cdf():
    data, _ = generate(SimConfig(n=1000, seed=6))
    m = fit_propensity(data, [1])
    assert m.covariate_subset == (1,)
    grid = np.linspace(0, 200, 50)
    vals = m.matrix(data.X[:20], grid)
    assert np.all(np.diff(vals, axis=0) >= 0)
    assert np.all(vals[0] == 0) and np.all(vals <= 1)
    assert np.all(vals[-1] > 0.8)


def test_model_validation():
    with pytest.raises(ValueError):
        PropensityModel(theta=[1.0], intercept=0.1, covariate_subset=())
    with pytest.raises(ValueError):
        PropensityModel(theta=[], intercept=0.1, covariate_subset=(), rate_floor=0)
