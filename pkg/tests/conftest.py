import sys

import numpy as np
import pytest

from lact.tensor import precision


@pytest.fixture(autouse=True)
def _f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.SUMMARY:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.SUMMARY:
        terminalreporter.write_line(line)
