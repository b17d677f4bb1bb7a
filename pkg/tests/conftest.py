import numpy as np
import pytest

from caml.config import TrainConfig
from caml.volgen import generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight 16^3 training volumes (half labeled) plus two test volumes."""
    out = tmp_path_factory.mktemp("tiny")
    return generate_dataset(3, 8, (16, 16, 16), 0.5, out, n_test=2)


@pytest.fixture
def tiny_config(tiny_dataset):
    return TrainConfig(manifest=str(tiny_dataset.root), crop_dims=(8, 8, 8), iterations=3,
                       n_levels=2, base_channels=4, proj_dim=8, top_i=8, proto_j=4,
                       bank_slots=16, window=(8, 8, 8), stride=(4, 4, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the one-line outcome of an acceptance criterion: criterion(n, ok, detail)."""

    def record(number, ok, detail):
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
