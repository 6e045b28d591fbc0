import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



TINY = {
    "name": "tiny",
    "seed": 3,
    "calibrate": {"car": [747, 12.8]},
    "channel": {"delay_ab": 51_650_000, "delay_ba": 51_650_000},
    "segments": [{"duration": 66}],
    "clocks": {"alice": {"resolution": 4}, "bob": {"bias": 500, "resolution": 4}},
    "analysis": {"window_single": 3.0, "window_round": 30.0, "template_duration": 30.0,
                 "round_trip_prior": 103_000_000, "timestamps": "all"},
}


@pytest.fixture
def tiny_doc():
    import copy

    return copy.deepcopy(TINY)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One short reduced-singles run shared by the runner and CLI tests."""
    from pairsync.runner import run_scenario
    from pairsync.scenario import from_dict

    out = tmp_path_factory.mktemp("tiny_run")
    return run_scenario(from_dict(TINY), out), out


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
