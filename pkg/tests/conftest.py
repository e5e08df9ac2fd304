import numpy as np
import pytest

from kgcontrol.dynamics import MacroState, ModelParams
from kgcontrol.graph import validate_transition
from kgcontrol.scenario import FIVE_NODE_M0, FIVE_NODE_P, FIVE_NODE_RHO0, TEST1_NU1, TEST1_NU2


@pytest.fixture
def P1():
    return validate_transition(FIVE_NODE_P)


@pytest.fixture
def y0():
    return MacroState.from_means(FIVE_NODE_RHO0, FIVE_NODE_M0)


@pytest.fixture
def exchange():
    return ModelParams.exchange(TEST1_NU1, TEST1_NU2, chi=1.0, mu=1.0)


@pytest.fixture
def healing():
    return ModelParams.infection_healing(0.15, 0.9, chi=1.0, sigma=1.0, gamma=1.0, n=5)


def random_stochastic(rng, n, sparsity=0.0):
    a = rng.random((n, n))
    a[rng.random((n, n)) < sparsity] = 0.0
    a[np.arange(n), (np.arange(n) + 1) % n] += 0.1  # keep a cycle so the graph stays connected
    return a / a.sum(axis=0)


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion, then assert it."""

    def record(number, ok, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
