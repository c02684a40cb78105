import numpy as np
import pytest

from ddekit.kernels import available_backends


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=available_backends())
def backend(request):
    return request.param
