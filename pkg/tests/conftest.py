import numpy as np
import pytest

from ucan.config import ModelConfig


@pytest.fixture
def g():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    # smallest config that still exercises every block: LKD needs 16 channels
    return ModelConfig(channels=16, groups=1, ha_depth=1, heads=2, lkd_depth=1,
                       wmsa_window=8, hpa_window=8, tile_rows=16, tile_cols=16)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
