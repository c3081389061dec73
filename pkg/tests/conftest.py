import pytest

from relnet.compile import compile_model
from relnet.scenarios import builtin_model


@pytest.fixture(scope="session")
def frame_cm():
    return compile_model(builtin_model("frame"), workers=2, seed=0)


@pytest.fixture(scope="session")
def lifecycle_cm():
    return compile_model(builtin_model("lifecycle"), workers=2, seed=0)


@pytest.fixture(scope="session")
def infranet_cm():
    return compile_model(builtin_model("infranet"), workers=2, seed=0)
