import numpy as np
import pytest

from ivdr.data import validate_dataset


@pytest.fixture
def wald_dataset():
    """Eight rows, no covariates besides a constant-zero modifier.

    Arm Z=0: mean Y 3, mean A 0.25. Arm Z=1: mean Y 7, mean A 0.75.
    """
    return validate_dataset({
        "y": [6.0, 2.0, 3.0, 1.0, 9.0, 5.0, 7.0, 7.0],
        "z": [0, 0, 0, 0, 1, 1, 1, 1],
        "a": [1, 0, 0, 0, 1, 1, 1, 0],
        "v": [0.0] * 8,
    }, "v")


def linear_trial(n, seed, psi=(0.5, 0.5), noise=1.0, confounding=0.5):
    """Randomized trial with non-adherence driven by an unobserved U."""
    rng = np.random.default_rng(seed)
    w1, v, u = rng.standard_normal((3, n))
    z = (rng.random(n) < 0.5).astype(float)
    a = (rng.random(n) < 1 / (1 + np.exp(-(-1 + 2.5 * z + confounding * u + 0.3 * w1)))).astype(float)
    y = 1 + 0.4 * w1 - 0.3 * v + a * (psi[0] + psi[1] * v) + u + noise * rng.standard_normal(n)
    return validate_dataset({"y": y, "z": z, "a": a, "w1": w1, "v": v}, "v")


def zoom_grid_root(f, center, half_width, steps=201, levels=8, shrink=20.0):
    """Minimise ``||f(x)||`` over a 2-D grid, re-centring and shrinking the grid each level."""
    c = np.asarray(center, dtype=float)
    hw = float(half_width)
    for _ in range(levels):
        g = np.linspace(-hw, hw, steps)
        X, Y = np.meshgrid(c[0] + g, c[1] + g, indexing="ij")
        val = f(X.ravel(), Y.ravel())
        k = int(np.argmin(val))
        c = np.array([X.ravel()[k], Y.ravel()[k]])
        hw /= shrink
    return c


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
