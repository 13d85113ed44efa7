import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: training or benchmark runs taking more than a few seconds")
    config.addinivalue_line("markers", "acceptance: acceptance criteria with printed PASS/FAIL lines")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
