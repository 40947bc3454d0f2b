"""Run configuration: defaults, JSON loading and override merging.

Sections mirror the subsystems: backbone, regions, objective, edit, service.
A config file is plain JSON with those sections; the MOVEACT_CONFIG env var
points at an override file, and per-request overrides are merged on top.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional


@dataclass
class BackboneConfig:
    kind: str = "toy"                     # "toy" or "real"
    checkpoint_path: Optional[str] = None # local path to the pretrained checkpoint
    toy_seed: int = 17
    num_steps: int = 50
    guidance_scale: float = 7.5           # reverse-branch CFG
    inversion_guidance_scale: float = 7.5 # inversion-branch CFG (knob; 1.0 = unguided inversion)


@dataclass
class RegionsConfig:
    threshold: float = 0.3       # on the min-max normalized object heatmap
    dilate_kernel: int = 3       # odd square structuring element


@dataclass
class ObjectiveConfig:
    lambda_oii: float = 0.5
    lambda_sai: float = 0.25
    lambda_bg: float = 0.25
    k: Optional[int] = None      # None -> ceil(0.25 * |target cells|), min 1
    alpha0: float = 150.0
    iterations: int = 50
    update_step_index: int = 35  # 1-based inversion step at which the latent is updated


@dataclass
class EditConfig:
    S: int = 7                   # replacement starts strictly after this reverse step
    layer_set: str = "decoder"   # which self-attention layers get cached K/V: decoder|encoder|all


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8787
    artifact_root: str = "runs"
    workers: int = 1


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    regions: RegionsConfig = field(default_factory=RegionsConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)

    def merged(self, overrides: Optional[Mapping[str, Any]]) -> "Config":
        """Return a new Config with a {section: {key: value}} overlay applied."""
        if not overrides:
            return copy.deepcopy(self)
        out = copy.deepcopy(self)
        for section, values in overrides.items():
            if not hasattr(out, section):
                raise KeyError(f"unknown config section: {section!r}")
            target = getattr(out, section)
            if not isinstance(values, Mapping):
                raise TypeError(f"overrides for section {section!r} must be a mapping")
            for key, value in values.items():
                if not hasattr(target, key):
                    raise KeyError(f"unknown config key: {section}.{key}")
                setattr(target, key, value)
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Config":
        return cls().merged(data)


def load_config(path: Optional[str | Path] = None) -> Config:
    """Load config from `path`, falling back to $MOVEACT_CONFIG, then defaults."""
    if path is None:
        path = os.environ.get("MOVEACT_CONFIG")
    if path is None:
        return Config()
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return Config.from_dict(data)
