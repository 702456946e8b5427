import numpy as np
import pytest

from multidev import create_environment


def crand(rng, *shape, dtype=np.complex64):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)).astype(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[1, 2, 3, 4], ids=lambda g: f"G{g}")
def env(request):
    with create_environment(request.param) as e:
        yield e


@pytest.fixture
def env4():
    with create_environment(4) as e:
        yield e


def random_instance(rng, n=16, J=4, density=0.4, dtype=np.complex64):
    """Host arrays for an operator test: mask, x = (rho, chat), dx, dy."""
    from multidev.phantom import make_mask

    ng = 2 * n
    mask = make_mask(ng, density, max(ng // 16, 1), int(rng.integers(1 << 30)))
    x = (crand(rng, ng, ng, dtype=dtype), crand(rng, J, ng, ng, dtype=dtype))
    dx = (crand(rng, ng, ng, dtype=dtype), crand(rng, J, ng, ng, dtype=dtype))
    dy = crand(rng, J, ng, ng, dtype=dtype) * mask
    return mask, x, dx, dy


def inner(a, b):
    return complex(np.vdot(np.asarray(a, np.complex128), np.asarray(b, np.complex128)))
