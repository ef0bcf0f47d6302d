import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from msnar.hmm import PsiState
from msnar.kernels import KernelConfig
from msnar.model import Bump, Linear, Logistic, ModelSpec, TransitionMatrix, paper_section4_model
from msnar.nw import ThetaField
from msnar.simulation import Trajectory, simulate

# numba compiles on first call; per-example deadlines would flag that as flaky
settings.register_profile(
    "msnar", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("msnar")


@pytest.fixture(scope="session")
def section4():
    return paper_section4_model()


@pytest.fixture(scope="session")
def section4_traj(section4):
    return simulate(section4, 1000, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def random_model(rng, m, kinds=("linear", "bump", "logistic")):
    """Small random ergodic model with moderate noise."""
    a = rng.dirichlet(np.ones(m), size=m) * 0.9 + 0.1 / m
    a /= a.sum(axis=1, keepdims=True)
    regs = []
    for _ in range(m):
        kind = kinds[rng.integers(len(kinds))]
        if kind == "linear":
            regs.append(Linear(rng.uniform(-0.8, 0.8), rng.uniform(-1, 1)))
        elif kind == "bump":
            regs.append(Bump(rng.uniform(-0.8, 0.8), rng.uniform(-2, 2), rng.uniform(0.5, 10)))
        else:
            regs.append(Logistic(rng.uniform(-2, 2), rng.uniform(-10, 10), rng.uniform(-1, 1)))
    return ModelSpec(TransitionMatrix(a), tuple(regs), tuple(rng.uniform(0.3, 1.2, m)))


def random_psi(rng, m, grid=None):
    """PsiState from a random tabulated field; init drawn from a Dirichlet."""
    grid = np.linspace(-4, 4, 17) if grid is None else grid
    theta = rng.normal(size=(m, grid.size))
    a = rng.dirichlet(np.ones(m), size=m)
    a /= a.sum(axis=1, keepdims=True)
    return PsiState(
        ThetaField(grid, theta, np.ones_like(theta)),
        TransitionMatrix(a),
        tuple(rng.uniform(0.4, 1.5, m)),
        tuple(rng.dirichlet(np.ones(m))),
    )


def random_traj(rng, n, m=None):
    y = rng.normal(scale=1.5, size=n + 1)
    x = None if m is None else rng.integers(0, m, size=n)
    return Trajectory(y, x)


def small_config(y, h=0.7, family="gaussian", num=9):
    y = np.asarray(y)
    return KernelConfig(family, h, tuple(np.linspace(y.min() - 0.5, y.max() + 0.5, num)))


def section4_sigma():
    return math.sqrt(0.4)


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
