"""Deterministic desk-scale backbone.

A 2-scale encoder/decoder denoiser (one self-attention and one cross-attention
layer per scale) with fixed random weights from a recorded seed, a latent of
4×8×8 and cross-attention semantic resolution 8×8. The autoencoder is a fixed
semi-orthogonal linear map over 8×8 block means, so round trips are exact on
block-constant images and the whole stack is float64 finite-difference clean.
"""

from __future__ import annotations

import hashlib
import math
import string
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ..attention import AttentionRecord, attention_output
from .base import (
    Backbone,
    BackboneCapabilities,
    BackboneError,
    DenoiserOutput,
    DiffusionSchedule,
    DimensionMismatchError,
    FeatureMap,
    InstrumentationSpec,
    LatentTensor,
    PromptEncoding,
    TimestepError,
    UnknownLayerError,
    linear_beta_alphas_cumprod,
    make_timestep_grid,
)

IMAGE_SIZE = 64
FACTOR = 8
LATENT_SHAPE = (4, 8, 8)
EMBED_DIM = 16
C0 = 8    # channels at the 8×8 scale
C1 = 16   # channels at the 4×4 scale
# Single-head attention: per-cell token mass stays individually steerable,
# which the latent-update loop needs at this tiny scale.
HEADS = 1
NUM_TRAIN_TIMESTEPS = 1000
# Keeps the denoiser gentle enough that 50-step DDIM inversion/reverse round
# trips stay tight even under guidance.
OUTPUT_SCALE = 0.05
# Sharpens cross-attention softmax so token maps have contrast worth
# optimizing against (near-uniform maps give a flat infusion loss).
CROSS_LOGIT_GAIN = 10.0

SELF_LAYERS = {
    "encoder": ("enc1.self", "enc2.self"),
    "middle": (),
    "decoder": ("dec1.self", "dec2.self"),
}
CROSS_LAYERS = ("enc1.cross", "enc2.cross", "dec1.cross", "dec2.cross")
LAYER_RESOLUTION = {
    "enc1.self": (8, 8), "enc1.cross": (8, 8),
    "enc2.self": (4, 4), "enc2.cross": (4, 4),
    "dec1.self": (4, 4), "dec1.cross": (4, 4),
    "dec2.self": (8, 8), "dec2.cross": (8, 8),
}
FEATURE_TAPS = {"decoder_block_1": (4, 4), "decoder_block_2": (8, 8)}
SEMANTIC_TAP = "decoder_block_2"
ALL_SELF_LAYERS = SELF_LAYERS["encoder"] + SELF_LAYERS["decoder"]

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _word_seed(word: str) -> int:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def tokenize(text: str) -> list[str]:
    return [w for w in (tok.translate(_PUNCT_TABLE) for tok in text.lower().split()) if w]


class _SelfAttention:
    def __init__(self, channels: int, gen: torch.Generator):
        self.channels = channels
        self.head_dim = channels // HEADS
        scale = 1.0 / math.sqrt(channels)
        self.wq = torch.randn(channels, channels, generator=gen, dtype=torch.float64) * scale
        self.wk = torch.randn(channels, channels, generator=gen, dtype=torch.float64) * scale
        self.wv = torch.randn(channels, channels, generator=gen, dtype=torch.float64) * scale
        self.wo = torch.randn(channels, channels, generator=gen, dtype=torch.float64) * scale

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        p, _ = x.shape
        return x.reshape(p, HEADS, self.head_dim).permute(1, 0, 2)

    def __call__(
        self,
        x: torch.Tensor,  # (C, H, W)
        kv_override: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        c, h, w = x.shape
        tokens = x.reshape(c, h * w).T  # (P, C)
        q = self._split(tokens @ self.wq)
        k = self._split(tokens @ self.wk)
        v = self._split(tokens @ self.wv)
        if kv_override is not None:
            k, v = kv_override
        out = attention_output(q, k, v)  # (heads, P, dh)
        merged = out.permute(1, 0, 2).reshape(h * w, c) @ self.wo
        return merged.T.reshape(c, h, w), k, v


class _CrossAttention:
    def __init__(self, channels: int, gen: torch.Generator):
        self.channels = channels
        self.head_dim = channels // HEADS
        scale = 1.0 / math.sqrt(channels)
        self.wq = torch.randn(channels, channels, generator=gen, dtype=torch.float64) * scale
        self.wk = torch.randn(EMBED_DIM, channels, generator=gen, dtype=torch.float64) / math.sqrt(EMBED_DIM)
        self.wv = torch.randn(EMBED_DIM, channels, generator=gen, dtype=torch.float64) / math.sqrt(EMBED_DIM)
        # small output gain: prompt conditioning nudges the prediction instead
        # of dominating it, which keeps guided inversion invertible
        self.wo = torch.randn(channels, channels, generator=gen, dtype=torch.float64) * scale * 0.5

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        p, _ = x.shape
        return x.reshape(p, HEADS, self.head_dim).permute(1, 0, 2)

    def __call__(self, x: torch.Tensor, text: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        c, h, w = x.shape
        tokens = x.reshape(c, h * w).T
        q = self._split(tokens @ self.wq)          # (heads, P, dh)
        k = self._split(text @ self.wk)            # (heads, T, dh)
        v = self._split(text @ self.wv)
        sim = torch.einsum("hid,hjd->hij", q, k) * (CROSS_LOGIT_GAIN / math.sqrt(self.head_dim))
        maps = sim.softmax(dim=-1)                 # (heads, P, T) post-softmax
        out = torch.einsum("hij,hjd->hid", maps, v)
        merged = out.permute(1, 0, 2).reshape(h * w, c) @ self.wo
        return merged.T.reshape(c, h, w), maps


def _conv_weight(out_c: int, in_c: int, gen: torch.Generator, ksize: int = 3) -> torch.Tensor:
    fan_in = in_c * ksize * ksize
    return torch.randn(out_c, in_c, ksize, ksize, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)


def _timestep_features(t: int) -> torch.Tensor:
    # sinusoidal features of the normalized timestep, fixed 16 dims
    pos = torch.tensor(float(t) / NUM_TRAIN_TIMESTEPS, dtype=torch.float64)
    freqs = torch.exp(torch.linspace(0.0, 4.0, 8, dtype=torch.float64))
    return torch.cat([torch.sin(pos * freqs), torch.cos(pos * freqs)])


class ToyBackbone(Backbone):
    def __init__(self, seed: int = 17):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)

        # autoencoder: semi-orthogonal 256×192 map over block means
        raw = torch.randn(256, 192, generator=gen, dtype=torch.float64)
        q, _ = torch.linalg.qr(raw)   # (256, 192), q^T q = I
        self._ae = q

        self.conv_in = _conv_weight(C0, 4, gen)
        self.conv_down = _conv_weight(C1, C0, gen)
        self.conv_dec1 = _conv_weight(C1, C1, gen)
        self.conv_dec2 = _conv_weight(C0, C1 + C0, gen)
        self.conv_out = _conv_weight(4, C0, gen)
        self.temb_proj0 = torch.randn(16, C0, generator=gen, dtype=torch.float64) * 0.25
        self.temb_proj1 = torch.randn(16, C1, generator=gen, dtype=torch.float64) * 0.25

        self.self_attn = {
            "enc1.self": _SelfAttention(C0, gen),
            "enc2.self": _SelfAttention(C1, gen),
            "dec1.self": _SelfAttention(C1, gen),
            "dec2.self": _SelfAttention(C0, gen),
        }
        self.cross_attn = {
            "enc1.cross": _CrossAttention(C0, gen),
            "enc2.cross": _CrossAttention(C1, gen),
            "dec1.cross": _CrossAttention(C1, gen),
            "dec2.cross": _CrossAttention(C0, gen),
        }

    # ------------------------------------------------------------------ ae

    def encode_image(self, image: np.ndarray) -> LatentTensor:
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise DimensionMismatchError(
                f"toy backbone expects ({IMAGE_SIZE}, {IMAGE_SIZE}, 3) RGB in [0,1], got {arr.shape}"
            )
        x = torch.from_numpy(arr).permute(2, 0, 1)                 # (3, 64, 64)
        pooled = F.avg_pool2d(x[None], FACTOR)[0]                  # (3, 8, 8)
        z = (self._ae @ pooled.reshape(-1)).reshape(LATENT_SHAPE)
        return LatentTensor(z, step_tag=0)

    def decode_latent(self, z: LatentTensor) -> np.ndarray:
        if tuple(z.data.shape) != LATENT_SHAPE:
            raise DimensionMismatchError(f"latent shape {tuple(z.data.shape)} != {LATENT_SHAPE}")
        pooled = (self._ae.T @ z.data.reshape(-1)).reshape(3, 8, 8)
        img = pooled.repeat_interleave(FACTOR, dim=1).repeat_interleave(FACTOR, dim=2)
        return img.clamp(0.0, 1.0).permute(1, 2, 0).detach().cpu().numpy()

    # -------------------------------------------------------------- prompt

    def encode_prompt(self, text: str, unconditional: bool = False) -> PromptEncoding:
        words = tokenize(text)
        if not words:
            if not unconditional:
                raise BackboneError("empty prompt is only valid as the unconditional encoding")
            gen = torch.Generator().manual_seed(_word_seed("<uncond>"))
            emb = torch.randn(1, EMBED_DIM, generator=gen, dtype=torch.float64) / math.sqrt(EMBED_DIM)
            return PromptEncoding(embeddings=emb, token_spans={}, is_unconditional=True)
        vecs = []
        spans: Dict[str, Tuple[int, ...]] = {}
        for i, word in enumerate(words):
            gen = torch.Generator().manual_seed(_word_seed(word))
            vec = torch.randn(EMBED_DIM, generator=gen, dtype=torch.float64) / math.sqrt(EMBED_DIM)
            pos = torch.sin(torch.arange(EMBED_DIM, dtype=torch.float64) * (i + 1) * 0.37)
            vecs.append(vec + 0.1 * pos)
            spans[word] = spans.get(word, ()) + (i,)
        return PromptEncoding(
            embeddings=torch.stack(vecs),
            token_spans=spans,
            is_unconditional=unconditional,
        )

    # ------------------------------------------------------------- denoise

    def _validate_instrument(self, instrument: InstrumentationSpec) -> None:
        for lid in instrument.self_attention_layers:
            if lid not in ALL_SELF_LAYERS:
                raise UnknownLayerError(f"unknown self-attention layer {lid!r}")
        for lid in instrument.kv_override:
            if lid not in ALL_SELF_LAYERS:
                raise UnknownLayerError(f"unknown self-attention layer {lid!r} in kv_override")
        for tap in instrument.feature_taps:
            if tap not in FEATURE_TAPS:
                raise UnknownLayerError(f"unknown feature tap {tap!r}")

    def denoise(
        self,
        z: LatentTensor,
        t: int,
        cond: PromptEncoding,
        instrument: Optional[InstrumentationSpec] = None,
    ) -> DenoiserOutput:
        if not (0 <= t < NUM_TRAIN_TIMESTEPS):
            raise TimestepError(f"timestep {t} outside [0, {NUM_TRAIN_TIMESTEPS})")
        instrument = instrument or InstrumentationSpec()
        self._validate_instrument(instrument)
        self.call_count += 1

        record = AttentionRecord() if instrument.wants_anything() else None
        want_res = instrument.cross_attention_resolution
        replaced = []
        taps: Dict[str, FeatureMap] = {}

        def run_self(lid: str, x: torch.Tensor) -> torch.Tensor:
            override = instrument.kv_override.get(lid)
            out, k, v = self.self_attn[lid](x, kv_override=override)
            if override is not None:
                replaced.append(lid)
            if record is not None and lid in instrument.self_attention_layers:
                record.self_kv[lid] = (k, v)
            return x + out

        def run_cross(lid: str, x: torch.Tensor) -> torch.Tensor:
            out, maps = self.cross_attn[lid](x, cond.embeddings)
            if record is not None and want_res is not None and LAYER_RESOLUTION[lid] == tuple(want_res):
                record.add_cross_map(lid, maps)
            return x + out

        temb = _timestep_features(t)
        b0 = (temb @ self.temb_proj0)[:, None, None]
        b1 = (temb @ self.temb_proj1)[:, None, None]

        h = F.silu(F.conv2d(z.data[None], self.conv_in, padding=1)[0] + b0)
        h = run_self("enc1.self", h)
        h = run_cross("enc1.cross", h)

        g = F.silu(F.conv2d(h[None], self.conv_down, stride=2, padding=1)[0] + b1)
        g = run_self("enc2.self", g)
        g = run_cross("enc2.cross", g)

        d1 = F.silu(F.conv2d(g[None], self.conv_dec1, padding=1)[0] + b1)
        d1 = run_self("dec1.self", d1)
        d1 = run_cross("dec1.cross", d1)
        if "decoder_block_1" in instrument.feature_taps:
            taps["decoder_block_1"] = FeatureMap(d1, "decoder_block_1")

        up = d1.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
        d2 = F.silu(F.conv2d(torch.cat([up, h], dim=0)[None], self.conv_dec2, padding=1)[0] + b0)
        d2 = run_self("dec2.self", d2)
        d2 = run_cross("dec2.cross", d2)
        if "decoder_block_2" in instrument.feature_taps:
            taps["decoder_block_2"] = FeatureMap(d2, "decoder_block_2")

        eps = OUTPUT_SCALE * F.conv2d(d2[None], self.conv_out, padding=1)[0]
        return DenoiserOutput(
            noise_prediction=eps,
            attention=record,
            feature_taps=taps,
            replaced_layers=tuple(replaced),
        )

    # ---------------------------------------------------------------- meta

    def capabilities(self) -> BackboneCapabilities:
        return BackboneCapabilities(
            latent_shape=LATENT_SHAPE,
            image_size=IMAGE_SIZE,
            downsample_factor=FACTOR,
            cross_attention_resolution=(8, 8),
            self_attention_layers=SELF_LAYERS,
            feature_taps=FEATURE_TAPS,
            semantic_feature_tap=SEMANTIC_TAP,
            autoencoder_tolerance=0.05,
        )

    def make_schedule(self, num_steps: int, guidance_scale: float) -> DiffusionSchedule:
        return DiffusionSchedule(
            num_steps=num_steps,
            timesteps=make_timestep_grid(num_steps, NUM_TRAIN_TIMESTEPS),
            guidance_scale=guidance_scale,
            alphas_cumprod=linear_beta_alphas_cumprod(NUM_TRAIN_TIMESTEPS),
        )
