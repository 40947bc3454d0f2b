from .base import (
    COND,
    UNCOND,
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
)
from .toy import ToyBackbone


def create_backbone(config) -> Backbone:
    """Build a backbone session from a BackboneConfig."""
    if config.kind == "toy":
        return ToyBackbone(seed=config.toy_seed)
    if config.kind == "real":
        from .sd import StableDiffusionBackbone

        return StableDiffusionBackbone(checkpoint_path=config.checkpoint_path)
    raise ValueError(f"unknown backbone kind {config.kind!r}")


__all__ = [
    "Backbone",
    "BackboneCapabilities",
    "BackboneError",
    "COND",
    "UNCOND",
    "DenoiserOutput",
    "DiffusionSchedule",
    "DimensionMismatchError",
    "FeatureMap",
    "InstrumentationSpec",
    "LatentTensor",
    "PromptEncoding",
    "TimestepError",
    "ToyBackbone",
    "UnknownLayerError",
    "create_backbone",
]
