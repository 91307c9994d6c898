import numpy as np
import pytest

from se3flow.tasks import make_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(3407)


@pytest.fixture(scope="session")
def triangle_small():
    return make_dataset("rotating_triangle", 6, 11, "train")


def random_twists(rng, n, max_angle=3.0, trans=2.0):
    """Twists whose rotation angle stays below ``max_angle``."""
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    omega = axis * rng.uniform(0, max_angle, size=(n, 1))
    return np.concatenate([omega, rng.uniform(-trans, trans, size=(n, 3))], axis=1)


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary --

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
