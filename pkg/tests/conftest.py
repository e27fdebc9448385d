import numpy as np
import pytest


def random_psd(rng, n, rank=None, scale=1.0):
    a = rng.standard_normal((n, rank or n))
    g = scale * a @ a.T
    # matmul is not bitwise symmetric once entries are large
    return 0.5 * (g + g.T)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
