import numpy as np
import pytest

ACCEPTANCE_LINES = []


def numeric_grad(f, w, step=1e-5):
    """Central finite differences of scalar ``f()`` with respect to array ``w`` (perturbed in place)."""
    g = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        old = w[idx]
        w[idx] = old + step
        fp = f()
        w[idx] = old - step
        fm = f()
        w[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    a, b = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
