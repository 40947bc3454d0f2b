"""Integration tier: exercises the real-checkpoint adapter when a local
checkpoint is available. Everything here is skipped on desk-scale machines.

    MOVEACT_SD_CHECKPOINT=/path/to/checkpoint pytest tests/test_backbone_real.py
"""

import os

import numpy as np
import pytest

CHECKPOINT = os.environ.get("MOVEACT_SD_CHECKPOINT")

diffusers = pytest.importorskip("diffusers")
pytestmark = pytest.mark.skipif(
    not CHECKPOINT, reason="set MOVEACT_SD_CHECKPOINT to run real-backbone tests"
)


@pytest.fixture(scope="module")
def bb():
    from moveact.backbone.sd import StableDiffusionBackbone

    return StableDiffusionBackbone(checkpoint_path=CHECKPOINT)


def test_latent_shape_512(bb):
    caps = bb.capabilities()
    assert caps.latent_shape == (4, 64, 64)
    z = bb.encode_image(np.random.default_rng(0).random((512, 512, 3)))
    assert z.shape == (4, 64, 64)


def test_roundtrip_within_tolerance(bb):
    caps = bb.capabilities()
    rng = np.random.default_rng(1)
    img = rng.random((512, 512, 3))
    back = bb.decode_latent(bb.encode_image(img))
    assert np.abs(back - img).mean() < caps.autoencoder_tolerance


def test_cross_attention_maps_at_16x16(bb):
    from moveact.backbone import InstrumentationSpec

    z = bb.encode_image(np.random.default_rng(2).random((512, 512, 3)))
    cond = bb.encode_prompt("A photo of cat")
    out = bb.denoise(z, 500, cond, InstrumentationSpec(cross_attention_resolution=(16, 16)))
    assert out.attention is not None and len(out.attention.cross_maps) > 0
    for m in out.attention.cross_maps.values():
        assert m.shape[0] == 256
        assert abs(m.sum(-1) - 1).max() < 1e-3


def test_capability_partition(bb):
    caps = bb.capabilities()
    enc = set(caps.self_attention_layers["encoder"])
    dec = set(caps.self_attention_layers["decoder"])
    assert enc and dec and not (enc & dec)
    assert caps.semantic_feature_tap == "decoder_block_3"
    assert caps.semantic_feature_tap in caps.feature_taps
