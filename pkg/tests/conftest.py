import numpy as np
import pytest
from hypothesis import settings

from hivoc.model import CostParams, ModelParams
from hivoc.oracle import outbreak_state

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=50)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def costs():
    return CostParams()


@pytest.fixture(scope="session")
def X0(params):
    return outbreak_state(params, 0.01)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture(scope="session")
def calibration(params):
    from hivoc.oracle import calibrate
    return calibrate(params)
