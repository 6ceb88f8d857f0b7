"""Shared fixtures: the synthetic benchmark scene and cropped variants."""

import numpy as np
import pytest

from ntkfilter import ImageTensor, synthetic_house


@pytest.fixture(scope="session")
def house64():
    return synthetic_house(64, 64)


def crop(image: ImageTensor, y0: int, x0: int, side: int) -> ImageTensor:
    planes = image.planes()[:, y0 : y0 + side, x0 : x0 + side]
    return ImageTensor(side, side, planes.reshape(image.channels, side * side))


@pytest.fixture(scope="session")
def house32(house64):
    return crop(house64, 16, 16, 32)


@pytest.fixture(scope="session")
def house16(house64):
    return crop(house64, 24, 24, 16)


@pytest.fixture(scope="session")
def house8(house64):
    return crop(house64, 28, 28, 8)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
