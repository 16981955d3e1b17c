import itertools

import numpy as np
import pytest


def metric_cost(rng, K, dim=3):
    """Euclidean distances between random points: a genuine metric."""
    pts = rng.normal(size=(K, dim))
    return np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)


def vertex_enumeration_ot(mu, nu, C):
    """Exact transport by enumerating every basic feasible solution.

    Independent of the LP path in the package; only practical for m, n <= 4.
    """
    mu, nu, C = (np.asarray(a, dtype=np.float64) for a in (mu, nu, C))
    m, n = C.shape
    cells = list(itertools.product(range(m), range(n)))
    A_full = np.zeros((m + n, m * n))
    for c, (i, j) in enumerate(cells):
        A_full[i, c] = 1
        A_full[m + j, c] = 1
    b = np.concatenate([mu, nu])
    best = np.inf
    for basis in itertools.combinations(range(m * n), m + n - 1):
        A = A_full[:, basis]
        x, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        if rank < m + n - 1 or np.abs(A @ x - b).max() > 1e-10 or np.any(x < -1e-12):
            continue
        cost = float(sum(C[cells[c]] * x[k] for k, c in enumerate(basis)))
        best = min(best, cost)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
