import numpy as np
import pytest

from cvae.numcore import tensor as T


def finite_difference_check(fn, params, h=1e-5, rtol=1e-4, atol=1e-7, max_entries=40, seed=0):
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    Returns the largest relative error seen over a random subset of entries.
    """
    loss = fn()
    grads = T.gradient(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up = float(fn().data)
            flat[k] = orig - h
            down = float(fn().data)
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[k]
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), atol / rtol)
            worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
