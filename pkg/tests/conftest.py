import numpy as np
import pytest

from coupled_cv.kernels import gaussian_init
from coupled_cv.targets import make_gaussian, make_logistic_regression, synthetic_logistic_data


@pytest.fixture
def std_normal():
    return make_gaussian([0.0], [[1.0]])


@pytest.fixture
def normal_2d():
    return make_gaussian([0.0, 0.0], np.eye(2))


@pytest.fixture
def small_logistic():
    return make_logistic_regression(synthetic_logistic_data(20, 3, seed=4), prior_variance=10.0)


@pytest.fixture
def init_1d():
    return gaussian_init(1.0, 1.0, 1)


def identity(points):
    return points[..., 0]


def square(points):
    return points[..., 0] ** 2


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
