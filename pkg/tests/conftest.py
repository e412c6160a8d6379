import numpy as np
import pytest

from clic.gen import GenConfig, generate_library
from clic.scenario import RoadGeometry, Scenario, ScenarioLibrary
from clic.sim import SimParams


@pytest.fixture(scope="session")
def small_lib():
    return generate_library(GenConfig(n_scenarios=60, seed=3))


@pytest.fixture(scope="session")
def sim():
    return SimParams()


def make_scenario(sid="t0", av=(50.0, 4.8, 20.0, 0.0), bvs=((80.0, 4.8, 20.0, 0.0),), horizon=10,
                  dt=0.04):
    """BVs cruise at constant speed along their heading."""
    av = np.asarray(av, dtype=np.float64)
    b0 = np.asarray(bvs, dtype=np.float64).reshape(-1, 4)
    frames = np.empty((horizon, len(b0), 4))
    cur = b0.copy()
    for t in range(horizon):
        cur = cur.copy()
        cur[:, 0] += cur[:, 2] * np.cos(cur[:, 3]) * dt
        cur[:, 1] += cur[:, 2] * np.sin(cur[:, 3]) * dt
        frames[t] = cur
    return Scenario(sid, dt, av, b0, frames)


def make_library(scenarios, road=None):
    return ScenarioLibrary(tuple(scenarios), road or RoadGeometry(), scenarios[0].dt, 4, 100)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
