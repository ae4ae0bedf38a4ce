import numpy as np
import pytest

from ctmdp.engine import ValueTable
from ctmdp.inventory import InventoryParams, solve_inventory


@pytest.fixture(scope="session")
def reference_params():
    return InventoryParams()


@pytest.fixture(scope="session")
def reference_solution(reference_params):
    """Converged solve of the reference inventory experiment (window theta +- 30)."""
    model, table, policy = solve_inventory(reference_params)
    return model, table, policy


@pytest.fixture(scope="session")
def small_params():
    return InventoryParams(window_margin=12, grid_a=21, grid_T=21)


@pytest.fixture(scope="session")
def small_solution(small_params):
    return solve_inventory(small_params)


@pytest.fixture
def abs_values():
    def make(p):
        lo, hi = p.window
        return ValueTable(p.window, np.abs(np.arange(lo, hi + 1) - float(p.theta)))

    return make


ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
