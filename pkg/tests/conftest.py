import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from s2sim.model import Tensor3

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tensor(values, wide=None):
    v = np.asarray(values, dtype=np.int32)
    if v.ndim == 1:
        v = v.reshape(1, 1, -1)
        if wide is not None:
            wide = np.asarray(wide, dtype=bool).reshape(1, 1, -1)
    return Tensor3(v, wide)


@pytest.fixture
def make_tensor():
    return tensor
