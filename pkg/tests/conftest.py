import numpy as np
import pytest

from fasm.harness import data_path
from fasm.kinematics import CriticalPoint, DHJoint, KinematicChain


@pytest.fixture(scope="session")
def ur5():
    return KinematicChain.from_json(data_path("ur5.json"))


@pytest.fixture
def one_link():
    return KinematicChain(joints=(DHJoint(a=1.0, alpha=0.0, d=0.0),),
                          critical_points=(CriticalPoint(link=0, offset=(0.0, 0.0, 0.0), id="tip"),))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record the one-line outcome of an acceptance criterion."""

    def record(number: int, passed: bool, seconds: float, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  ({seconds:6.2f} s)  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
