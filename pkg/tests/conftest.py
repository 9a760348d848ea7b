import numpy as np
import pytest

from hscore import synthgen


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_tile():
    return synthgen.generate_tile(synthgen.SynthSpec(n_nuclei=20, seed=7))


def uniform_image(color, size=32):
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = color
    return img
