import numpy as np
import pytest

from deepbayes.autodiff import GradientTape
from deepbayes.rng import RngStream


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def tape_grad(f, *arrays):
    with GradientTape() as tape:
        ts = [tape.watch(a, i) for i, a in enumerate(arrays)]
        out = f(*ts)
    grads = tape.backward(out)
    return out.item(), [grads[i] for i in range(len(arrays))]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def scaled_rel_err(a, b):
    """Max elementwise error relative to the gradient's scale, ``max|a-b| / max(|a|_inf, |b|_inf)``.

    Entries many orders below the largest one sit under the float64
    resolution of a finite difference of the summed objective, so an
    unscaled per-entry ratio would measure the reference, not the gradient.
    """
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@pytest.fixture
def rng():
    return RngStream(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
