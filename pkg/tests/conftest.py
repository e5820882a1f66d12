import numpy as np
import pytest

from pnpe.models import GaussToyModel, SvarConfig, SvarModel


@pytest.fixture
def toy():
    return GaussToyModel()


@pytest.fixture(scope="session")
def svar6():
    return SvarModel(SvarConfig.reference(6))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
