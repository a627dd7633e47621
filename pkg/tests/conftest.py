import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from immrm.data import TrialDataset

settings.register_profile("default", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_trial(rng, n=60, K=2, J=1, p=1, miss=0.3, strata=0, hetero=True, monotone=False):
    """Random trial with at least two complete cases per arm."""
    arm = np.arange(n) % (J + 1)
    rng.shuffle(arm)
    X = rng.normal(size=(n, p))
    B = rng.normal(size=(J + 1, p, K))
    Y = np.empty((n, K))
    for j in range(J + 1):
        idx = arm == j
        A = rng.normal(size=(K, K))
        S = A @ A.T / K + 0.5 * np.eye(K)
        if hetero:
            S = S * (1 + j)
        Y[idx] = 0.3 * j + X[idx] @ (B[j] if hetero else B[0]) + rng.multivariate_normal(np.zeros(K), S, idx.sum())
    if monotone:
        c = rng.integers(0, K + 1, n)
        M = np.arange(K)[None, :] < np.where(rng.random(n) < miss, c, K)[:, None]
    else:
        M = rng.random((n, K)) > miss
    for j in range(J + 1):
        M[np.flatnonzero(arm == j)[:2]] = True
    stratum = None
    if strata:
        stratum = rng.integers(1, strata + 1, n)
    return TrialDataset(arm, X, np.where(M, Y, np.nan), M, J, stratum=stratum)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
