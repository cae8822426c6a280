import numpy as np
import pytest
import torch

from kdconcepts.nets import NetSpec
from kdconcepts.synthdata import DatasetSpec, generate_dataset, split_dataset

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(images_per_class=60, image_size=16, grid=8, seed=3)


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    samples, manifest = generate_dataset(tiny_spec)
    train, val = split_dataset(samples, 0.75, 0)
    return samples, manifest, train, val


@pytest.fixture(scope="session")
def tiny_net():
    return NetSpec(conv_blocks=((4, 3, 2), (4, 3, 2)), fc_dims=(16, 8, 2), image_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_state():
    torch.manual_seed(0)
    yield
