"""Real-checkpoint adapter around a pretrained latent-diffusion stack.

Loads a local Stable Diffusion v1.x checkpoint through `diffusers` (an
optional dependency: install the `real` extra) and exposes the same
instrumented interface as the toy backbone. Cross-attention maps are recorded
post-softmax at the 16×16 semantic resolution, self-attention K/V per UNet
attention layer, and decoder-block feature taps via forward hooks.

Requires a GPU-class machine to be practical; nothing here is exercised by the
desk-scale test suite.
"""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch

from ..attention import AttentionRecord
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
    make_timestep_grid,
)

SEMANTIC_RESOLUTION = (16, 16)
SEMANTIC_TAP = "decoder_block_3"


def _require_diffusers():
    try:
        import diffusers  # noqa: F401
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise BackboneError(
            "the real backbone needs the optional 'real' extra "
            "(pip install 'moveact[real]') and a local checkpoint"
        ) from exc
    return diffusers


class _Recorder:
    """Shared mutable state for one instrumented denoiser call."""

    def __init__(self, instrument: InstrumentationSpec, record: Optional[AttentionRecord]):
        self.instrument = instrument
        self.record = record
        self.replaced: List[str] = []
        self.taps: Dict[str, FeatureMap] = {}


class _InstrumentedProcessor:
    """Attention processor recording maps / K,V and honoring kv_override."""

    def __init__(self, layer_id: str, is_cross: bool, state_ref):
        self.layer_id = layer_id
        self.is_cross = is_cross
        self.state_ref = state_ref  # callable returning the active _Recorder or None

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
        state: Optional[_Recorder] = self.state_ref()
        residual = hidden_states
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)

        context = encoder_hidden_states if encoder_hidden_states is not None else hidden_states
        query = attn.to_q(hidden_states)
        key = attn.to_k(context)
        value = attn.to_v(context)

        heads = attn.heads
        query = attn.head_to_batch_dim(query)  # (b*heads, P, dh)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)

        if state is not None and not self.is_cross:
            override = state.instrument.kv_override.get(self.layer_id)
            if override is not None:
                key, value = override
                key = key.to(query.dtype).to(query.device)
                value = value.to(query.dtype).to(query.device)
                state.replaced.append(self.layer_id)

        probs = attn.get_attention_scores(query, key, attention_mask)  # post-softmax

        if state is not None and state.record is not None:
            if self.is_cross and state.instrument.cross_attention_resolution is not None:
                res = state.instrument.cross_attention_resolution
                if probs.shape[1] == res[0] * res[1]:
                    maps = probs.reshape(-1, heads, probs.shape[1], probs.shape[2])[0]
                    state.record.add_cross_map(self.layer_id, maps)
            if not self.is_cross and self.layer_id in state.instrument.self_attention_layers:
                k_rec = key.reshape(-1, heads, key.shape[1], key.shape[2])[0]
                v_rec = value.reshape(-1, heads, value.shape[1], value.shape[2])[0]
                state.record.self_kv[self.layer_id] = (k_rec, v_rec)

        hidden_states = torch.bmm(probs, value)
        hidden_states = attn.batch_to_head_dim(hidden_states)
        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)

        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


class StableDiffusionBackbone(Backbone):
    def __init__(self, checkpoint_path: str, device: str = "cuda", dtype=torch.float32):
        super().__init__()
        if not checkpoint_path:
            raise BackboneError("backbone.checkpoint_path must point at a local checkpoint")
        diffusers = _require_diffusers()
        pipe = diffusers.StableDiffusionPipeline.from_pretrained(
            checkpoint_path, torch_dtype=dtype, safety_checker=None, requires_safety_checker=False
        )
        self.device = torch.device(device if torch.cuda.is_available() else "cpu")
        self.vae = pipe.vae.to(self.device)
        self.text_encoder = pipe.text_encoder.to(self.device)
        self.tokenizer = pipe.tokenizer
        self.unet = pipe.unet.to(self.device)
        self.scheduler_config = dict(pipe.scheduler.config)
        self.dtype = dtype
        self._active_state: Optional[_Recorder] = None
        self._self_layers, self._cross_layers = self._install_processors()
        self._num_train_timesteps = int(self.scheduler_config.get("num_train_timesteps", 1000))

    # -------------------------------------------------------------- wiring

    def _install_processors(self) -> Tuple[Mapping[str, Tuple[str, ...]], Tuple[str, ...]]:
        partition: Dict[str, List[str]] = {"encoder": [], "middle": [], "decoder": []}
        cross: List[str] = []
        procs = {}
        for name in self.unet.attn_processors.keys():
            layer_id = name[: -len(".processor")] if name.endswith(".processor") else name
            is_cross = ".attn2" in layer_id
            procs[name] = _InstrumentedProcessor(layer_id, is_cross, lambda: self._active_state)
            if is_cross:
                cross.append(layer_id)
                continue
            if layer_id.startswith("down_blocks"):
                partition["encoder"].append(layer_id)
            elif layer_id.startswith("mid_block"):
                partition["middle"].append(layer_id)
            elif layer_id.startswith("up_blocks"):
                partition["decoder"].append(layer_id)
        self.unet.set_attn_processor(procs)
        return {k: tuple(v) for k, v in partition.items()}, tuple(cross)

    # ------------------------------------------------------------------ ae

    def encode_image(self, image: np.ndarray) -> LatentTensor:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] != arr.shape[1]:
            raise DimensionMismatchError(f"expected square (H, H, 3) RGB in [0,1], got {arr.shape}")
        if arr.shape[0] % 8 != 0:
            raise DimensionMismatchError("image size must be divisible by the VAE downsampling factor 8")
        x = torch.from_numpy(arr).permute(2, 0, 1)[None].to(self.device, self.dtype) * 2.0 - 1.0
        with torch.no_grad():
            posterior = self.vae.encode(x).latent_dist
            z = posterior.mode() * self.vae.config.scaling_factor
        return LatentTensor(z[0].float().cpu(), step_tag=0)

    def decode_latent(self, z: LatentTensor) -> np.ndarray:
        with torch.no_grad():
            x = self.vae.decode(
                z.data[None].to(self.device, self.dtype) / self.vae.config.scaling_factor
            ).sample
        img = ((x[0].float() + 1.0) / 2.0).clamp(0, 1).permute(1, 2, 0).cpu().numpy()
        return img

    # -------------------------------------------------------------- prompt

    def encode_prompt(self, text: str, unconditional: bool = False) -> PromptEncoding:
        if not text and not unconditional:
            raise BackboneError("empty prompt is only valid as the unconditional encoding")
        inputs = self.tokenizer(
            text, padding="max_length", max_length=self.tokenizer.model_max_length,
            truncation=True, return_tensors="pt",
        )
        with torch.no_grad():
            emb = self.text_encoder(inputs.input_ids.to(self.device))[0][0]
        spans: Dict[str, Tuple[int, ...]] = {}
        cursor = 1  # skip BOS
        for word in text.lower().split():
            pieces = self.tokenizer(word, add_special_tokens=False).input_ids
            idx = tuple(range(cursor, cursor + len(pieces)))
            key = word.strip(".,:;!?\"'()")
            spans[key] = spans.get(key, ()) + idx
            cursor += len(pieces)
        return PromptEncoding(embeddings=emb.float().cpu(), token_spans=spans,
                              is_unconditional=unconditional)

    # ------------------------------------------------------------- denoise

    def denoise(
        self,
        z: LatentTensor,
        t: int,
        cond: PromptEncoding,
        instrument: Optional[InstrumentationSpec] = None,
    ) -> DenoiserOutput:
        if not (0 <= t < self._num_train_timesteps):
            raise TimestepError(f"timestep {t} outside [0, {self._num_train_timesteps})")
        instrument = instrument or InstrumentationSpec()
        self._validate_instrument(instrument)
        self.call_count += 1

        record = AttentionRecord() if instrument.wants_anything() else None
        state = _Recorder(instrument, record)
        hooks = []
        for tap in instrument.feature_taps:
            block_idx = int(tap.rsplit("_", 1)[1]) - 1
            module = self.unet.up_blocks[block_idx]

            def _hook(mod, args, output, _tap=tap):
                out = output[0] if isinstance(output, tuple) else output
                state.taps[_tap] = FeatureMap(out[0], _tap)

            hooks.append(module.register_forward_hook(_hook))

        latent = z.data[None].to(self.device, self.dtype)
        emb = cond.embeddings[None].to(self.device, self.dtype)
        self._active_state = state
        try:
            grad_mode = torch.enable_grad() if latent.requires_grad or z.data.requires_grad else torch.no_grad()
            with grad_mode:
                eps = self.unet(latent, t, encoder_hidden_states=emb).sample[0]
        finally:
            self._active_state = None
            for h in hooks:
                h.remove()
        return DenoiserOutput(
            noise_prediction=eps,
            attention=record,
            feature_taps=state.taps,
            replaced_layers=tuple(state.replaced),
        )

    def _validate_instrument(self, instrument: InstrumentationSpec) -> None:
        known_self = set(self._self_layers["encoder"]) | set(self._self_layers["middle"]) | set(
            self._self_layers["decoder"]
        )
        for lid in list(instrument.self_attention_layers) + list(instrument.kv_override):
            if lid not in known_self:
                raise UnknownLayerError(f"unknown self-attention layer {lid!r}")
        for tap in instrument.feature_taps:
            if not tap.startswith("decoder_block_"):
                raise UnknownLayerError(f"unknown feature tap {tap!r}")
            idx = int(tap.rsplit("_", 1)[1])
            if not (1 <= idx <= len(self.unet.up_blocks)):
                raise UnknownLayerError(f"unknown feature tap {tap!r}")

    # ---------------------------------------------------------------- meta

    def capabilities(self) -> BackboneCapabilities:
        sample = self.unet.config.sample_size  # 64 for 512×512 checkpoints
        taps = {}
        for i in range(len(self.unet.up_blocks)):
            # up block i outputs sample/2^(3-i) per SD v1 UNet geometry
            res = sample // (2 ** (len(self.unet.up_blocks) - 1 - i))
            taps[f"decoder_block_{i + 1}"] = (res, res)
        return BackboneCapabilities(
            latent_shape=(self.unet.config.in_channels, sample, sample),
            image_size=sample * 8,
            downsample_factor=8,
            cross_attention_resolution=SEMANTIC_RESOLUTION,
            self_attention_layers=self._self_layers,
            feature_taps=taps,
            semantic_feature_tap=SEMANTIC_TAP,
            autoencoder_tolerance=0.08,
        )

    def make_schedule(self, num_steps: int, guidance_scale: float) -> DiffusionSchedule:
        betas = torch.linspace(
            self.scheduler_config.get("beta_start", 0.00085) ** 0.5,
            self.scheduler_config.get("beta_end", 0.012) ** 0.5,
            self._num_train_timesteps,
            dtype=torch.float64,
        ) ** 2  # scaled_linear, the SD v1 default
        if self.scheduler_config.get("beta_schedule") == "linear":
            betas = torch.linspace(
                self.scheduler_config["beta_start"], self.scheduler_config["beta_end"],
                self._num_train_timesteps, dtype=torch.float64,
            )
        return DiffusionSchedule(
            num_steps=num_steps,
            timesteps=make_timestep_grid(num_steps, self._num_train_timesteps),
            guidance_scale=guidance_scale,
            alphas_cumprod=torch.cumprod(1.0 - betas, dim=0),
        )
