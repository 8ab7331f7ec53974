import numpy as np
import pytest

from iitrack.config import RunConfig, SensorModel, WorldConfig


@pytest.fixture
def small_cfg():
    return RunConfig(world=WorldConfig(n_sequences=4, n_frames=8), seed=3)


def noiseless_sensor(**kw):
    base = dict(sigma_pos=0.0, sigma_dim=0.0, sigma_theta=0.0, sigma_app=0.0, p_miss=0.0, clutter_rate=0.0)
    base.update(kw)
    return SensorModel(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria outcomes, filled by test_acceptance and printed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
