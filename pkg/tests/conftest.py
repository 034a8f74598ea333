import numpy as np
import pytest
import torch

from deal.cli import default_model_path
from deal.io import load_model
from deal.solver import DealModel

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    """Untrained 8-filter model normalized on an 8x8 grid."""
    return DealModel.initialize(1, 8, 1e-3, seed=0, shape=(8, 8))


@pytest.fixture(scope="session")
def toy_model():
    return load_model(default_model_path())


def dense(apply, shape):
    """Dense matrix of a batched linear map, column j = apply(e_j)."""
    from deal.theory import dense_materialize

    return dense_materialize(apply, shape)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
