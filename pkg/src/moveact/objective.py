"""Inversion-stage objective: object information infusion (top-k in-box
attention + out-of-box suppression), source-area inpainting against
repeat-and-truncate aligned edge features, background preservation, their
weighted combination, and the plain gradient step with linearly decaying size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch

from .backbone.base import FeatureMap, LatentTensor
from .regions import BinaryMask


class ObjectiveError(ValueError):
    pass


class NonFiniteGradientError(RuntimeError):
    """The latent gradient went NaN/Inf; the iteration must abort, not clamp."""


@dataclass
class LossWeights:
    lambda_oii: float = 0.5
    lambda_sai: float = 0.25
    lambda_bg: float = 0.25

    def __post_init__(self):
        if min(self.lambda_oii, self.lambda_sai, self.lambda_bg) < 0:
            raise ObjectiveError("loss weights must be nonnegative")
        if self.lambda_oii == self.lambda_sai == self.lambda_bg == 0:
            raise ObjectiveError("at least one loss weight must be positive")


@dataclass
class UpdateSchedule:
    alpha0: float = 150.0
    iterations: int = 50
    update_step_index: int = 35  # 1-based inversion step

    def __post_init__(self):
        if self.alpha0 <= 0:
            raise ObjectiveError("alpha0 must be positive")
        if self.iterations < 0:
            raise ObjectiveError("iterations must be >= 0")
        if self.update_step_index < 1:
            raise ObjectiveError("update_step_index must be >= 1")


@dataclass
class LossBreakdown:
    l_in: float
    l_out: float
    l_oii: float
    l_sai: float
    l_bg: float
    l_total: float

    def __post_init__(self):
        vals = (self.l_in, self.l_out, self.l_oii, self.l_sai, self.l_bg, self.l_total)
        if not all(math.isfinite(v) for v in vals):
            raise ObjectiveError(f"non-finite loss breakdown: {vals}")
        if abs(self.l_oii - (self.l_in + self.l_out)) > 1e-6:
            raise ObjectiveError("l_oii != l_in + l_out")
        if not (-1e-9 <= self.l_in <= 1 + 1e-9 and -1e-9 <= self.l_out <= 1 + 1e-9):
            raise ObjectiveError("l_in/l_out outside [0,1]")
        if self.l_sai < 0 or self.l_bg < 0:
            raise ObjectiveError("l_sai/l_bg must be >= 0")

    def as_row(self) -> Tuple[float, ...]:
        return (self.l_in, self.l_out, self.l_oii, self.l_sai, self.l_bg, self.l_total)


def _mask_tensor(mask: BinaryMask, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(mask.data).to(device=like.device, dtype=torch.bool)


def default_top_k(target: BinaryMask) -> int:
    """k = ceil(0.25 · |target cells|), at least 1."""
    return max(1, math.ceil(0.25 * target.count))


def loss_in(heatmap_raw: torch.Tensor, target: BinaryMask, k: int) -> torch.Tensor:
    """1 minus the mean of the k largest attention scores inside the target box.

    Gradients flow through the selected entries only (fixed-index gather at
    the current values).
    """
    if heatmap_raw.shape != target.resolution:
        raise ObjectiveError(f"heatmap {tuple(heatmap_raw.shape)} vs target {target.resolution}")
    if k < 1:
        raise ObjectiveError("k must be >= 1")
    if k > target.count:
        raise ObjectiveError(f"k={k} exceeds the {target.count} target cells")
    inside = heatmap_raw[_mask_tensor(target, heatmap_raw)]
    top = torch.topk(inside, k).values
    return 1.0 - top.mean()


def loss_out(heatmap_raw: torch.Tensor, target: BinaryMask) -> torch.Tensor:
    """Mean attention score over the cells outside the target box."""
    if heatmap_raw.shape != target.resolution:
        raise ObjectiveError(f"heatmap {tuple(heatmap_raw.shape)} vs target {target.resolution}")
    outside = ~_mask_tensor(target, heatmap_raw)
    n = int(outside.sum())
    if n == 0:
        raise ObjectiveError("target covers the whole grid; no outside cells")
    return heatmap_raw[outside].sum() / n


def loss_oii(heatmap_raw: torch.Tensor, target: BinaryMask, k: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (total, l_in, l_out) with total = l_in + l_out."""
    l_i = loss_in(heatmap_raw, target, k)
    l_o = loss_out(heatmap_raw, target)
    return l_i + l_o, l_i, l_o


def rat_align(edge_features: torch.Tensor, count: int) -> torch.Tensor:
    """Repeat-and-truncate: cycle the edge feature vectors to exactly `count` rows."""
    if edge_features.ndim != 2 or edge_features.shape[0] == 0:
        raise ObjectiveError("edge_features must be a nonempty (n, channels) matrix")
    if count < 1:
        raise ObjectiveError("count must be >= 1")
    idx = torch.arange(count, device=edge_features.device) % edge_features.shape[0]
    return edge_features[idx]


def _masked_features(feat: FeatureMap, mask: BinaryMask) -> torch.Tensor:
    """Rows of (cells, channels) for mask cells in raster-scan order."""
    if feat.resolution != mask.resolution:
        raise ObjectiveError(
            f"feature resolution {feat.resolution} vs mask resolution {mask.resolution}; "
            "resample the mask first"
        )
    c = feat.data.shape[0]
    flat = feat.data.reshape(c, -1).T  # (H*W, C), raster order
    return flat[_mask_tensor(mask, feat.data).reshape(-1)]


def loss_sai(
    feat_updated: FeatureMap,
    feat_original: FeatureMap,
    source: BinaryMask,
    edge: BinaryMask,
) -> torch.Tensor:
    """Mean |F_updated[source] − RAT(F_original[edge])| over cells × channels.

    An empty source (edit-in-place) contributes exactly 0; an empty edge with
    a nonempty source is an error because there is nothing to inpaint from.
    """
    if source.count == 0:
        return torch.zeros((), dtype=feat_updated.data.dtype, device=feat_updated.data.device)
    if edge.count == 0:
        raise ObjectiveError("empty edge ring with a nonempty source area")
    src_feats = _masked_features(feat_updated, source)
    edge_feats = _masked_features(feat_original, edge).detach()
    aligned = rat_align(edge_feats, src_feats.shape[0])
    return (src_feats - aligned).abs().mean()


def loss_bg(feat_updated: FeatureMap, feat_original: FeatureMap, background: BinaryMask) -> torch.Tensor:
    """Mean |F_updated − F_original| over background cells × channels (0 if empty)."""
    if background.count == 0:
        return torch.zeros((), dtype=feat_updated.data.dtype, device=feat_updated.data.device)
    upd = _masked_features(feat_updated, background)
    orig = _masked_features(feat_original, background).detach()
    return (upd - orig).abs().mean()


def loss_inv(
    heatmap_raw: torch.Tensor,
    target: BinaryMask,
    k: int,
    feat_updated: FeatureMap,
    feat_original: FeatureMap,
    source: BinaryMask,
    edge: BinaryMask,
    background: BinaryMask,
    weights: LossWeights,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Weighted combination of the three losses, returning the scalar (with
    graph) and its float breakdown."""
    l_oii_t, l_in_t, l_out_t = loss_oii(heatmap_raw, target, k)
    l_sai_t = loss_sai(feat_updated, feat_original, source, edge)
    l_bg_t = loss_bg(feat_updated, feat_original, background)
    total = weights.lambda_oii * l_oii_t + weights.lambda_sai * l_sai_t + weights.lambda_bg * l_bg_t
    breakdown = LossBreakdown(
        l_in=l_in_t.detach().item(), l_out=l_out_t.detach().item(), l_oii=l_oii_t.detach().item(),
        l_sai=l_sai_t.detach().item(), l_bg=l_bg_t.detach().item(), l_total=total.detach().item(),
    )
    return total, breakdown


def step_size(iteration: int, schedule: UpdateSchedule) -> float:
    """Linearly decaying step: alpha0 · (I − i) / I, never reaching zero."""
    if not (0 <= iteration < schedule.iterations):
        raise ObjectiveError(
            f"iteration {iteration} outside [0, {schedule.iterations})"
        )
    return schedule.alpha0 * (schedule.iterations - iteration) / schedule.iterations


def latent_gradient_step(z: LatentTensor, grad: torch.Tensor, alpha_i: float) -> LatentTensor:
    if grad.shape != z.data.shape:
        raise ObjectiveError(f"gradient shape {tuple(grad.shape)} != latent shape {z.shape}")
    if not torch.isfinite(grad).all():
        raise NonFiniteGradientError("non-finite latent gradient; aborting the update iteration")
    return LatentTensor(z.data.detach() - alpha_i * grad, step_tag=z.step_tag)


def write_loss_log(rows: Sequence[Tuple[int, LossBreakdown, float]], path) -> None:
    """CSV run log: iteration, l_in, l_out, l_oii, l_sai, l_bg, l_total, alpha_i."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,l_in,l_out,l_oii,l_sai,l_bg,l_total,alpha_i\n")
        for iteration, breakdown, alpha_i in rows:
            vals = ",".join(f"{v:.10g}" for v in breakdown.as_row())
            fh.write(f"{iteration},{vals},{alpha_i:.10g}\n")
