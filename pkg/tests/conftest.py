import math

import numpy as np
import pytest

from staggercox.core import Dataset


def brute_force_log_pl(start, stop, event, Z, beta, offsets=None, n_subjects=None):
    """Term-by-term partial likelihood: materialise every risk set."""
    m = len(stop)
    offsets = np.zeros(m) if offsets is None else offsets
    n = m if n_subjects is None else n_subjects
    total = 0.0
    for i in range(m):
        if not event[i]:
            continue
        t = stop[i]
        lp_i = offsets[i] + float(np.dot(Z[i], beta))
        denom = 0.0
        for j in range(m):
            if start[j] < t <= stop[j]:
                denom += math.exp(offsets[j] + float(np.dot(Z[j], beta)))
        total += lp_i - math.log(denom)
    return total / n


def random_dataset(rng, n, p=2, adopt_p=0.6, ties=False):
    X = rng.normal(size=(n, p))
    U = rng.exponential(1.0, n) + 0.05
    if ties:
        U = np.round(U * 4) / 4 + 0.25
    A = np.where(rng.random(n) < adopt_p, rng.uniform(0, 1.5, n), np.inf)
    A[rng.random(n) < 0.1] = 0.0
    event = rng.random(n) < 0.7
    if not event.any():
        event[0] = True
    return Dataset(np.arange(1, n + 1), X, A, U, event)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
