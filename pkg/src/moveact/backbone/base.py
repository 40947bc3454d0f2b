"""Backbone abstraction over the pretrained latent-diffusion stack.

A backbone bundles the image autoencoder, the text encoder and an
instrumentable denoiser. Two implementations exist: `ToyBackbone`
(deterministic, CPU-cheap, finite-difference checkable) and
`StableDiffusionBackbone` (real checkpoint adapter).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import torch

COND = "cond"
UNCOND = "uncond"
GUIDANCE_BRANCHES = (COND, UNCOND)


class BackboneError(RuntimeError):
    pass


class DimensionMismatchError(BackboneError):
    """Input image or latent has an unsupported shape."""


class UnknownLayerError(BackboneError):
    """Instrumentation referenced a layer or tap the backbone does not expose."""


class TimestepError(BackboneError):
    """Timestep outside the trained diffusion range."""


@dataclass
class LatentTensor:
    """A latent code z_t tagged with the scheduler timestep it belongs to."""

    data: torch.Tensor  # (C, H_lat, W_lat)
    step_tag: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionMismatchError(f"latent must be (C, H, W), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise BackboneError("latent contains NaN/Inf")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: torch.Tensor, step_tag: Optional[int] = None) -> "LatentTensor":
        return LatentTensor(data, self.step_tag if step_tag is None else step_tag)

    def clone(self) -> "LatentTensor":
        return LatentTensor(self.data.detach().clone(), self.step_tag)


@dataclass
class PromptEncoding:
    embeddings: torch.Tensor                      # (tokens, embed_dim)
    token_spans: Dict[str, Tuple[int, ...]]       # word -> token indices (strictly increasing)
    is_unconditional: bool = False

    def indices_for_word(self, word: str) -> Tuple[int, ...]:
        key = word.lower().strip()
        if key not in self.token_spans:
            raise KeyError(f"word {word!r} not present in prompt")
        return self.token_spans[key]


@dataclass(frozen=True)
class DiffusionSchedule:
    """DDIM timestep grid plus the noise schedule needed for stepping.

    `timesteps` is stored in inversion order (strictly increasing); reverse
    order is its mirror image, so both branches visit the identical grid.
    """

    num_steps: int
    timesteps: Tuple[int, ...]
    guidance_scale: float
    alphas_cumprod: torch.Tensor  # (num_train_timesteps,)

    def __post_init__(self):
        if len(self.timesteps) != self.num_steps:
            raise ValueError("len(timesteps) must equal num_steps")
        if any(b <= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ValueError("timesteps must be strictly increasing in inversion order")

    @property
    def reverse_timesteps(self) -> Tuple[int, ...]:
        return tuple(reversed(self.timesteps))

    def prev_timestep(self, t: int) -> int:
        """The grid neighbor below t, or -1 below the first grid point (alpha=1)."""
        i = self.timesteps.index(t)
        return self.timesteps[i - 1] if i > 0 else -1

    def _alpha(self, t: int) -> torch.Tensor:
        if t < 0:
            return torch.ones((), dtype=self.alphas_cumprod.dtype)
        return self.alphas_cumprod[t]

    def inversion_step(self, noise_pred: torch.Tensor, t: int, sample: torch.Tensor) -> torch.Tensor:
        """Move the latent from the grid neighbor below t forward to t (DDIM, eta=0)."""
        a_prev = self._alpha(self.prev_timestep(t))
        a_t = self._alpha(t)
        pred_x0 = (sample - (1 - a_prev).sqrt() * noise_pred) / a_prev.sqrt()
        return a_t.sqrt() * pred_x0 + (1 - a_t).sqrt() * noise_pred

    def reverse_step(self, noise_pred: torch.Tensor, t: int, sample: torch.Tensor) -> torch.Tensor:
        """Move the latent from grid time t back to its grid neighbor (DDIM, eta=0)."""
        a_t = self._alpha(t)
        a_prev = self._alpha(self.prev_timestep(t))
        pred_x0 = (sample - (1 - a_t).sqrt() * noise_pred) / a_t.sqrt()
        return a_prev.sqrt() * pred_x0 + (1 - a_prev).sqrt() * noise_pred


def make_timestep_grid(num_steps: int, num_train_timesteps: int = 1000) -> Tuple[int, ...]:
    """Evenly spaced grid spanning the full trained range (linspace spacing).

    Every step count shares the endpoint, so a finer grid is strictly a finer
    discretization of the same inversion path.
    """
    grid = np.linspace(0, num_train_timesteps - 1, num_steps).round().astype(int)
    if len(set(grid.tolist())) != num_steps:
        raise ValueError(f"{num_steps} steps do not fit the {num_train_timesteps}-step range")
    return tuple(int(t) for t in grid)


def linear_beta_alphas_cumprod(
    num_train_timesteps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    betas = torch.linspace(beta_start, beta_end, num_train_timesteps, dtype=dtype)
    return torch.cumprod(1.0 - betas, dim=0)


@dataclass(frozen=True)
class InstrumentationSpec:
    """Opt-in recording and intervention for one denoiser call.

    cross_attention_resolution: record post-softmax cross-attention maps for
        every layer operating at that spatial resolution.
    self_attention_layers: record (K, V) for these self-attention layers.
    feature_taps: record the named decoder-block outputs.
    kv_override: per-layer (K, V) pairs that replace the layer's own key and
        value for this call (the editing-branch injection).
    """

    cross_attention_resolution: Optional[Tuple[int, int]] = None
    self_attention_layers: Tuple[str, ...] = ()
    feature_taps: Tuple[str, ...] = ()
    kv_override: Mapping[str, Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    def wants_anything(self) -> bool:
        return bool(
            self.cross_attention_resolution
            or self.self_attention_layers
            or self.feature_taps
            or self.kv_override
        )


@dataclass
class FeatureMap:
    data: torch.Tensor  # (channels, H_f, W_f)
    layer_name: str

    @property
    def resolution(self) -> Tuple[int, int]:
        return tuple(self.data.shape[-2:])  # type: ignore[return-value]


@dataclass
class DenoiserOutput:
    noise_prediction: torch.Tensor
    attention: Optional["AttentionRecord"] = None  # forward ref into moveact.attention
    feature_taps: Dict[str, FeatureMap] = field(default_factory=dict)
    replaced_layers: Tuple[str, ...] = ()


@dataclass(frozen=True)
class BackboneCapabilities:
    latent_shape: Tuple[int, int, int]
    image_size: int
    downsample_factor: int
    cross_attention_resolution: Tuple[int, int]
    self_attention_layers: Mapping[str, Tuple[str, ...]]  # {"encoder"|"middle"|"decoder": ids}
    feature_taps: Mapping[str, Tuple[int, int]]           # tap name -> (H_f, W_f)
    semantic_feature_tap: str
    autoencoder_tolerance: float

    def layer_set(self, name: str) -> Tuple[str, ...]:
        if name == "all":
            return tuple(
                lid
                for part in ("encoder", "middle", "decoder")
                for lid in self.self_attention_layers.get(part, ())
            )
        if name not in self.self_attention_layers:
            raise KeyError(f"unknown layer set {name!r}")
        return tuple(self.self_attention_layers[name])


class Backbone(ABC):
    """One backbone session: single-threaded denoiser access, counted calls."""

    def __init__(self) -> None:
        self.call_count = 0

    @abstractmethod
    def encode_image(self, image: np.ndarray) -> LatentTensor: ...

    @abstractmethod
    def decode_latent(self, z: LatentTensor) -> np.ndarray: ...

    @abstractmethod
    def encode_prompt(self, text: str, unconditional: bool = False) -> PromptEncoding: ...

    @abstractmethod
    def denoise(
        self,
        z: LatentTensor,
        t: int,
        cond: PromptEncoding,
        instrument: Optional[InstrumentationSpec] = None,
    ) -> DenoiserOutput: ...

    @abstractmethod
    def capabilities(self) -> BackboneCapabilities: ...

    @abstractmethod
    def make_schedule(self, num_steps: int, guidance_scale: float) -> DiffusionSchedule: ...
