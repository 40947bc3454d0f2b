import numpy as np
import pytest
import torch

from conftest import block_image
from moveact.backbone import (
    DimensionMismatchError,
    InstrumentationSpec,
    LatentTensor,
    TimestepError,
    ToyBackbone,
    UnknownLayerError,
)
from moveact.backbone.base import BackboneError


@pytest.fixture(scope="module")
def bb():
    return ToyBackbone()


# -------------------------------------------------------------- autoencoder

def test_encode_shape_and_tag(bb):
    z = bb.encode_image(block_image(0))
    assert z.shape == (4, 8, 8)
    assert z.step_tag == 0


def test_encode_rejects_wrong_size(bb):
    with pytest.raises(DimensionMismatchError):
        bb.encode_image(np.zeros((32, 32, 3)))


def test_zero_image_gives_finite_latent(bb):
    z = bb.encode_image(np.zeros((64, 64, 3)))
    assert torch.isfinite(z.data).all()


def test_zero_latent_decodes_to_valid_image(bb):
    img = bb.decode_latent(LatentTensor(torch.zeros(4, 8, 8, dtype=torch.float64)))
    assert img.shape == (64, 64, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_round_trip_exact_on_block_images(bb):
    for seed in range(5):
        img = block_image(seed)
        back = bb.decode_latent(bb.encode_image(img))
        assert np.abs(back - img).max() < 1e-5


def test_round_trip_error_below_reported_tolerance_on_smooth_images(bb):
    # smooth gradients: within-block variation stays well under the tolerance
    tol = bb.capabilities().autoencoder_tolerance
    yy, xx = np.meshgrid(np.linspace(0, 1, 64), np.linspace(0, 1, 64), indexing="ij")
    for phase in np.linspace(0, 3, 10):
        img = np.stack([
            0.5 + 0.4 * np.sin(2 * np.pi * (xx + phase) / 2),
            0.5 + 0.4 * np.cos(2 * np.pi * (yy - phase) / 2),
            0.5 + 0.3 * np.sin(2 * np.pi * (xx + yy) / 3),
        ], axis=-1)
        back = bb.decode_latent(bb.encode_image(img))
        assert np.abs(back - img).mean() < tol


def test_decode_rejects_wrong_shape(bb):
    with pytest.raises(DimensionMismatchError):
        bb.decode_latent(LatentTensor(torch.zeros(4, 16, 16, dtype=torch.float64)))


# ------------------------------------------------------------------ prompts

def test_prompt_spans_cover_words(bb):
    enc = bb.encode_prompt("A photo of cat")
    assert enc.token_spans["cat"] == (3,)
    assert set(enc.token_spans) == {"a", "photo", "of", "cat"}


def test_prompt_spans_disjoint(bb):
    enc = bb.encode_prompt("A running cat")
    assert not set(enc.token_spans["running"]) & set(enc.token_spans["cat"])


def test_unconditional_encoding(bb):
    enc = bb.encode_prompt("", unconditional=True)
    assert enc.is_unconditional
    assert enc.embeddings.shape[0] == 1
    with pytest.raises(BackboneError):
        bb.encode_prompt("")


def test_prompt_encoding_deterministic(bb):
    a = bb.encode_prompt("A sitting dog")
    b = bb.encode_prompt("A sitting dog")
    assert torch.equal(a.embeddings, b.embeddings)


def test_repeated_word_collects_all_indices(bb):
    enc = bb.encode_prompt("a photo of a cat")
    assert enc.token_spans["a"] == (0, 3)


# ------------------------------------------------------------------ denoise

def test_denoise_without_instrumentation(bb):
    z = bb.encode_image(block_image(1))
    out = bb.denoise(z, 500, bb.encode_prompt("A photo of cat"))
    assert out.attention is None
    assert out.feature_taps == {}
    assert out.noise_prediction.shape == z.data.shape


def test_denoise_records_requested_layers_only(bb):
    z = bb.encode_image(block_image(1))
    spec = InstrumentationSpec(
        cross_attention_resolution=(8, 8),
        self_attention_layers=("dec2.self",),
        feature_taps=("decoder_block_1",),
    )
    out = bb.denoise(z, 500, bb.encode_prompt("A photo of cat"), spec)
    assert set(out.attention.self_kv) == {"dec2.self"}
    assert out.attention.cross_layers() == ("dec2.cross", "enc1.cross")
    assert set(out.feature_taps) == {"decoder_block_1"}
    assert out.feature_taps["decoder_block_1"].resolution == (4, 4)


def test_denoise_rejects_unknown_layer_and_timestep(bb):
    z = bb.encode_image(block_image(1))
    cond = bb.encode_prompt("A photo of cat")
    with pytest.raises(UnknownLayerError):
        bb.denoise(z, 500, cond, InstrumentationSpec(self_attention_layers=("nope.self",)))
    with pytest.raises(UnknownLayerError):
        bb.denoise(z, 500, cond, InstrumentationSpec(feature_taps=("decoder_block_9",)))
    with pytest.raises(TimestepError):
        bb.denoise(z, 5000, cond)


def test_denoise_bitwise_deterministic(bb):
    z = bb.encode_image(block_image(2))
    cond = bb.encode_prompt("A photo of cat")
    spec = InstrumentationSpec(cross_attention_resolution=(8, 8),
                               self_attention_layers=("dec1.self", "dec2.self"))
    a = bb.denoise(z, 700, cond, spec)
    b = bb.denoise(z, 700, cond, spec)
    assert torch.equal(a.noise_prediction, b.noise_prediction)
    for key in a.attention.cross_maps:
        assert torch.equal(a.attention.cross_maps[key], b.attention.cross_maps[key])


def test_instrumentation_neutrality(bb):
    z = bb.encode_image(block_image(3))
    cond = bb.encode_prompt("A photo of cat")
    plain = bb.denoise(z, 700, cond)
    instrumented = bb.denoise(z, 700, cond, InstrumentationSpec(
        cross_attention_resolution=(8, 8),
        self_attention_layers=("enc1.self", "enc2.self", "dec1.self", "dec2.self"),
        feature_taps=("decoder_block_1", "decoder_block_2"),
    ))
    assert torch.equal(plain.noise_prediction, instrumented.noise_prediction)


def test_cross_attention_is_latent_sensitive(bb):
    z = bb.encode_image(block_image(4))
    cond = bb.encode_prompt("A photo of cat")
    spec = InstrumentationSpec(cross_attention_resolution=(8, 8))
    base = bb.denoise(z, 700, cond, spec)
    z2 = LatentTensor(z.data + 0.1, step_tag=z.step_tag)
    bumped = bb.denoise(z2, 700, cond, spec)
    changed = any(
        not torch.allclose(base.attention.cross_maps[k], bumped.attention.cross_maps[k])
        for k in base.attention.cross_maps
    )
    assert changed


def test_noise_prediction_gradient_matches_finite_differences(bb):
    z = bb.encode_image(block_image(5))
    cond = bb.encode_prompt("A photo of cat")
    zv = z.data.clone().requires_grad_(True)
    out = bb.denoise(LatentTensor(zv), 700, cond)
    out.noise_prediction.sum().backward()
    grad = zv.grad

    rng = np.random.default_rng(0)
    eps = 1e-3
    for _ in range(20):
        c, i, j = rng.integers(0, 4), rng.integers(0, 8), rng.integers(0, 8)
        zp, zm = z.data.clone(), z.data.clone()
        zp[c, i, j] += eps
        zm[c, i, j] -= eps
        fp = bb.denoise(LatentTensor(zp), 700, cond).noise_prediction.sum().item()
        fm = bb.denoise(LatentTensor(zm), 700, cond).noise_prediction.sum().item()
        fd = (fp - fm) / (2 * eps)
        an = grad[c, i, j].item()
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-3


# ------------------------------------------------------------- capabilities

def test_capabilities_partition(bb):
    caps = bb.capabilities()
    enc = set(caps.self_attention_layers["encoder"])
    dec = set(caps.self_attention_layers["decoder"])
    assert enc and dec and not (enc & dec)
    assert caps.cross_attention_resolution == (8, 8)
    assert caps.semantic_feature_tap in caps.feature_taps
    assert caps.feature_taps[caps.semantic_feature_tap] == (8, 8)
    assert caps.layer_set("all") == caps.self_attention_layers["encoder"] + caps.self_attention_layers["decoder"]


# ---------------------------------------------------------------- schedule

def test_schedule_grid_monotone_and_sized(bb):
    sched = bb.make_schedule(50, 7.5)
    assert len(sched.timesteps) == 50
    assert all(b > a for a, b in zip(sched.timesteps, sched.timesteps[1:]))
    assert sched.reverse_timesteps == tuple(reversed(sched.timesteps))


def test_schedule_steps_are_mutually_inverse(bb):
    sched = bb.make_schedule(50, 7.5)
    z = torch.randn(4, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    eps = torch.randn(4, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    for t in (sched.timesteps[0], sched.timesteps[20], sched.timesteps[-1]):
        forward = sched.inversion_step(eps, t, z)
        back = sched.reverse_step(eps, t, forward)
        assert torch.allclose(back, z, atol=1e-10)


def test_seed_changes_weights():
    a = ToyBackbone(seed=17)
    b = ToyBackbone(seed=18)
    z = a.encode_image(block_image(0))
    cond_a, cond_b = a.encode_prompt("A photo of cat"), b.encode_prompt("A photo of cat")
    assert not torch.equal(
        a.denoise(z, 500, cond_a).noise_prediction,
        b.denoise(LatentTensor(b.encode_image(block_image(0)).data), 500, cond_b).noise_prediction,
    )
