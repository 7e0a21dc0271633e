import numpy as np
import pytest

from camforge.nn import generate_toy_model
from camforge.postproc import synthetic_image

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def tiny32():
    return generate_toy_model(42, "tiny")


@pytest.fixture(scope="session")
def tiny64(tiny32):
    return tiny32.astype(64)


@pytest.fixture(scope="session")
def image():
    return synthetic_image(7, (1, 16, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
