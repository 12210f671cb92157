import numpy as np
import pytest
from hypothesis import settings

from platoon_mpc.powertrain import TruckParams, default_drag_model
from platoon_mpc.road import make_s_road

_ACCEPTANCE: dict[int, str] = {}

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def s_road():
    return make_s_road()


@pytest.fixture(scope="session")
def drag_model():
    return default_drag_model()


@pytest.fixture
def truck():
    return TruckParams()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _timed_run(cfg):
    import time

    from platoon_mpc.sim import run_scenario
    t0 = time.perf_counter()
    log, met = run_scenario(cfg)
    return log, met, time.perf_counter() - t0


@pytest.fixture(scope="session")
def s_road_runs():
    """Heterogeneous {14, 38, 38} t platoon on the S-road under both MPC variants."""
    from platoon_mpc.sim import ScenarioConfig, platoon_params
    out = {}
    for kind in ("considerate", "anticipative"):
        cfg = ScenarioConfig(platoon_params([14000.0, 38000.0, 38000.0]), make_s_road(), kind)
        out[kind] = _timed_run(cfg)
    return out


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per numbered criterion; printed again in the terminal summary."""
    def report(number, passed, detail):
        line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
