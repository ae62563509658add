import numpy as np
import pytest

from oovtrack import synth


@pytest.fixture(scope="session")
def short_session():
    return synth.generate_session(seed=11, duration=20.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_recordings():
    return [synth.generate_session(seed=100 + i, duration=30.0) for i in range(6)]


@pytest.fixture(scope="session")
def small_dataset(small_recordings):
    from oovtrack.dataset import DatasetConfig, build_dataset

    cfg = DatasetConfig(fov_grid=(60.0, 90.0, 120.0), split=(4 / 6, 1 / 6, 1 / 6), max_seq_s=4.0)
    return build_dataset(small_recordings, cfg, seed=3)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
