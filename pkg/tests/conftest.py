import numpy as np
import pytest

from mfhier.tensor_core import CLASSICAL, QUANTUM, NBodyState, SiteSpace


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_state(space: SiteSpace, n: int, rng, physical: bool = False) -> NBodyState:
    """Random n-site state; physical=True gives positive trace-one states."""
    m = space.dim
    if space.is_quantum:
        d = m**n
        a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        mat = a @ a.conj().T if physical else (a + a.conj().T) / 2
        if physical:
            mat = mat / np.trace(mat)
        return NBodyState(space, n, mat.reshape(space.state_shape(n)))
    data = rng.random(space.state_shape(n)) if physical else rng.normal(size=space.state_shape(n))
    if physical:
        data = data / data.sum()
    return NBodyState(space, n, data)


@pytest.fixture(params=[CLASSICAL, QUANTUM])
def space(request):
    return SiteSpace(request.param, 2)
