import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from e2srs.geometry import default_geometry
from e2srs.synth import ChannelConfig, Trajectory, gen_dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def geometry():
    return default_geometry()


@pytest.fixture(scope="session")
def clean_dataset(tmp_path_factory, geometry):
    """Noiseless LoS-only test points, 8 snapshots each."""
    path = tmp_path_factory.mktemp("data") / "clean.srsd"
    cfg = ChannelConfig(nlos_prob=0.0, snr_db=None, seed=11)
    gen_dataset(geometry, cfg, Trajectory.testpoints(8, 0.1), path)
    return path


@pytest.fixture(scope="session")
def mixed_dataset(tmp_path_factory, geometry):
    """20 dB SNR, 15% NLoS, a short walk followed by test points."""
    path = tmp_path_factory.mktemp("data") / "mixed.srsd"
    traj = Trajectory.walk([(3, 5), (47, 5), (47, 10), (3, 10)], 1.0, 0.25) + Trajectory.testpoints(4, 0.25)
    gen_dataset(geometry, ChannelConfig(seed=5), traj, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
