import numpy as np
import pytest

from moveact import Config, EditRequest, ToyBackbone
from moveact.regions import BoundingBox


def block_image(seed: int) -> np.ndarray:
    """64×64 RGB image constant over 8×8 blocks (in the toy decoder's range)."""
    rng = np.random.default_rng(seed)
    return np.kron(rng.random((8, 8, 3)), np.ones((8, 8, 1)))


# The seed-fixed request used by the optimization-sanity and accounting
# checks; the box sits over a low-response region for the object token, so
# the update loop has real transfer work to do.
FIXED_IMAGE_SEED = 7
FIXED_BOX = (0.25, 0.0, 0.75, 0.5)


def fixed_request(**overrides) -> EditRequest:
    return EditRequest(
        image=block_image(FIXED_IMAGE_SEED),
        inversion_prompt="A photo of cat",
        editing_prompt="A running cat",
        object_word="cat",
        target_box=BoundingBox(*FIXED_BOX),
        **overrides,
    )


@pytest.fixture
def toy() -> ToyBackbone:
    return ToyBackbone()


@pytest.fixture
def base_config() -> Config:
    return Config()
