from pathlib import Path

import numpy as np
import pytest

from unsyncse.grid import ac_power_flow, load_case, parse_case
from unsyncse.measurements import MeterSigmas, build_plan, greedy_pmu_placement

CASE = Path(__file__).resolve().parents[1] / "cases" / "baranwu33.txt"

TWO_BUS = """
BASE_MVA 10
BUS 1 slack 0 0
BUS 2 PQ 0.5 0.2
BRANCH 1 2 0.01 0.02 0 1
"""


@pytest.fixture(scope="session")
def feeder():
    return load_case(CASE)


@pytest.fixture(scope="session")
def base_state(feeder):
    return ac_power_flow(feeder)


@pytest.fixture(scope="session")
def pmu_buses(feeder):
    return greedy_pmu_placement(feeder, 11)


@pytest.fixture(scope="session")
def plan195(feeder, pmu_buses):
    return build_plan(feeder, pmu_buses, "grl_3", MeterSigmas())


@pytest.fixture(scope="session")
def plan180(feeder, pmu_buses):
    return build_plan(feeder, pmu_buses, "grl_reduced", MeterSigmas())


@pytest.fixture
def two_bus():
    return parse_case(TWO_BUS)


def random_states(model, count, spread=0.05, seed=0):
    """States scattered around flat start."""
    rng = np.random.default_rng(seed)
    n = model.n
    for _ in range(count):
        x = np.concatenate([rng.normal(0, spread, n - 1), 1 + rng.normal(0, spread, n)])
        yield x


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line, print it and fail the test when it does not hold."""
    log = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} {title}: {detail}"
        log[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE_KEY, {})
    if log:
        terminalreporter.section("acceptance")
        for number in sorted(log):
            terminalreporter.write_line(log[number])
