import numpy as np
import pytest

from amdcn import kernels


@pytest.fixture(params=kernels.BACKENDS)
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
