import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from tdoanet import harness  # noqa: E402
from tdoanet.scenario import load_scenario  # noqa: E402

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

SCENARIOS = Path(__file__).parent.parent / "scenarios"


@pytest.fixture(scope="session")
def scenario_dir() -> Path:
    return SCENARIOS


@pytest.fixture(scope="session")
def ring10():
    """The ten-sensor ring NCV scenario, its network and its certified gain."""
    sc = load_scenario(SCENARIOS / "ring10_ncv.json")
    setup = harness.build_setup(sc)
    gains = harness.design_gain(sc, setup)
    return sc, setup, gains


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ring10_delay4():
    """Ring scenario with random link delays up to 4 and its delay-aware gain."""
    sc = load_scenario(SCENARIOS / "ring10_ncv_delay4.json")
    setup = harness.build_setup(sc)
    gains = harness.design_gain(sc, setup)
    return sc, setup, gains


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = [v for k, v in sorted(getattr(mod, "RESULTS", {}).items(), key=str) if isinstance(k, int)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
