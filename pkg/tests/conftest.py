import numpy as np
import pytest

from inif.volume import generate_phantom


def fd_gradient(f, x, h=1e-4):
    """Fourth-order central differences of scalar ``f`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        vals = []
        for s in (2, 1, -1, -2):
            flat[i] = v + s * h
            vals.append(f(x))
        flat[i] = v
        gf[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def rel_error(analytic, numeric):
    """Largest entry-wise relative error, floored at 1e-6 of the largest magnitude."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(n)) if n.size else 0.0, 1e-12)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6 * scale)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


@pytest.fixture(scope="session")
def blobs():
    return generate_phantom("gaussian_blobs", (1, 1, 16, 64, 64), seed=0)


@pytest.fixture(scope="session")
def small_blobs():
    return generate_phantom("gaussian_blobs", (1, 1, 8, 32, 32), seed=0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2])):
        terminalreporter.write_line(line)
