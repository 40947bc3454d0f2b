"""Two-branch editing pipeline.

Branch A (inversion): DDIM-invert the input under the inversion prompt,
caching self-attention K/V for both guidance branches at every step; at the
configured step, run the latent-update loop that transfers the object's
attention mass into the target box and inpaints/preserves the rest.

Branch B (editing): DDIM reverse from the inversion endpoint under the
editing prompt, injecting the cached inversion K/V into the configured
self-attention layers from step S+1 onward, then decode.
"""

from __future__ import annotations

import dataclasses
import json
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .attention import (
    KVCache,
    TokenHeatmap,
    aggregate_token_map,
    kv_replacement_policy,
    record_inversion_kv,
    save_kv_cache,
)
from .backbone.base import (
    COND,
    UNCOND,
    Backbone,
    FeatureMap,
    InstrumentationSpec,
    LatentTensor,
)
from .config import Config
from .objective import (
    LossBreakdown,
    LossWeights,
    UpdateSchedule,
    default_top_k,
    latent_gradient_step,
    loss_inv,
    step_size,
    write_loss_log,
)
from .regions import (
    BoundingBox,
    RegionMasks,
    RegionParams,
    build_region_masks,
    mask_to_png_bytes,
    resample_mask,
)


class PipelineError(RuntimeError):
    pass


@dataclass
class EditRequest:
    image: np.ndarray               # (H, W, 3) RGB in [0,1]
    inversion_prompt: str
    editing_prompt: str
    object_word: str
    target_box: BoundingBox
    overrides: Optional[dict] = None
    seed: int = 0

    def __post_init__(self):
        if not self.inversion_prompt.strip() or not self.editing_prompt.strip():
            raise PipelineError("both prompts must be nonempty")
        words = {w.strip(".,:;!?\"'()") for w in self.inversion_prompt.lower().split()}
        if self.object_word.lower().strip() not in words:
            raise PipelineError(
                f"object word {self.object_word!r} does not occur in the inversion prompt"
            )


@dataclass
class InversionTrace:
    latents: List[LatentTensor]                      # z_0 ... z_T, length num_steps + 1
    kv_cache: KVCache
    heatmap_at_update: Optional[TokenHeatmap]
    masks: Optional[RegionMasks]
    loss_log: List[Tuple[int, LossBreakdown, float]]
    update_steps_run: Tuple[int, ...] = ()


@dataclass
class EditResult:
    edited_image: np.ndarray
    trace_ref: str
    replaced_call_count: int
    config_snapshot: dict = field(default_factory=dict)


def _update_block(
    backbone: Backbone,
    z: LatentTensor,
    t: int,
    cond,
    request: EditRequest,
    config: Config,
    caps,
) -> Tuple[LatentTensor, TokenHeatmap, RegionMasks, List[Tuple[int, LossBreakdown, float]]]:
    """The inner optimization loop at the update step's timestep.

    The object heatmap and region masks come from one instrumented call on the
    pre-update latent and stay fixed; the per-iteration heatmap and features
    are re-recorded so the losses always see the current latent.
    """
    attn_res = caps.cross_attention_resolution
    tap = caps.semantic_feature_tap
    instr = InstrumentationSpec(cross_attention_resolution=attn_res, feature_taps=(tap,))
    token_idx = cond.indices_for_word(request.object_word)

    with torch.no_grad():
        out0 = backbone.denoise(z, t, cond, instr)
    heat0 = aggregate_token_map(out0.attention, token_idx, attn_res)
    masks = build_region_masks(
        heat0,
        request.target_box,
        RegionParams(config.regions.threshold, config.regions.dilate_kernel),
    )
    feat_res = caps.feature_taps[tap]
    source_f = resample_mask(masks.source, feat_res)
    edge_f = resample_mask(masks.edge, feat_res)
    background_f = resample_mask(masks.background, feat_res)
    feat_original = FeatureMap(out0.feature_taps[tap].data.detach(), tap)

    weights = LossWeights(config.objective.lambda_oii, config.objective.lambda_sai,
                          config.objective.lambda_bg)
    schedule = UpdateSchedule(config.objective.alpha0, config.objective.iterations,
                              config.objective.update_step_index)
    k = config.objective.k if config.objective.k is not None else default_top_k(masks.target)

    log: List[Tuple[int, LossBreakdown, float]] = []
    z_cur = z
    for it in range(schedule.iterations):
        z_var = z_cur.data.detach().clone().requires_grad_(True)
        out = backbone.denoise(LatentTensor(z_var, z_cur.step_tag), t, cond, instr)
        heat = aggregate_token_map(out.attention, token_idx, attn_res)
        total, breakdown = loss_inv(
            heat.raw, masks.target, k,
            out.feature_taps[tap], feat_original,
            source_f, edge_f, background_f, weights,
        )
        (grad,) = torch.autograd.grad(total, z_var)
        alpha_i = step_size(it, schedule)
        z_cur = latent_gradient_step(LatentTensor(z_var.detach(), z_cur.step_tag), grad, alpha_i)
        log.append((it, breakdown, alpha_i))
    return z_cur, heat0, masks, log


def invert(request: EditRequest, backbone: Backbone, config: Config) -> InversionTrace:
    caps = backbone.capabilities()
    num_steps = config.backbone.num_steps
    if not (1 <= config.objective.update_step_index <= num_steps):
        raise PipelineError(
            f"update_step_index {config.objective.update_step_index} outside [1, {num_steps}]"
        )
    schedule = backbone.make_schedule(num_steps, config.backbone.inversion_guidance_scale)
    cond = backbone.encode_prompt(request.inversion_prompt)
    uncond = backbone.encode_prompt("", unconditional=True)
    layer_set = caps.layer_set(config.edit.layer_set)
    record_instr = InstrumentationSpec(self_attention_layers=layer_set)

    z = backbone.encode_image(request.image)
    latents = [z.clone()]
    cache = KVCache()
    heatmap: Optional[TokenHeatmap] = None
    masks: Optional[RegionMasks] = None
    loss_log: List[Tuple[int, LossBreakdown, float]] = []
    update_steps: List[int] = []

    for i, t in enumerate(schedule.timesteps):
        step = i + 1
        if step == config.objective.update_step_index and config.objective.iterations > 0:
            z, heatmap, masks, loss_log = _update_block(backbone, z, t, cond, request, config, caps)
            update_steps.append(step)
        with torch.no_grad():
            out_c = backbone.denoise(z, t, cond, record_instr)
            out_u = backbone.denoise(z, t, uncond, record_instr)
        record_inversion_kv(out_c.attention, t, COND, cache)
        record_inversion_kv(out_u.attention, t, UNCOND, cache)
        s = schedule.guidance_scale
        eps = out_u.noise_prediction + s * (out_c.noise_prediction - out_u.noise_prediction)
        z = LatentTensor(schedule.inversion_step(eps, t, z.data), step_tag=t)
        latents.append(z.clone())

    cache.freeze()
    trace = InversionTrace(
        latents=latents, kv_cache=cache, heatmap_at_update=heatmap,
        masks=masks, loss_log=loss_log, update_steps_run=tuple(update_steps),
    )
    if len(trace.latents) != num_steps + 1:
        raise PipelineError("inversion trace length does not match the schedule")
    if set(cache.timesteps()) != set(schedule.timesteps):
        raise PipelineError("K/V cache does not cover every inversion timestep")
    return trace


def edit(trace: InversionTrace, request: EditRequest, backbone: Backbone, config: Config) -> EditResult:
    if not trace.kv_cache.frozen:
        raise PipelineError("inversion trace must be frozen before editing")
    caps = backbone.capabilities()
    schedule = backbone.make_schedule(config.backbone.num_steps, config.backbone.guidance_scale)
    cond = backbone.encode_prompt(request.editing_prompt)
    uncond = backbone.encode_prompt("", unconditional=True)
    layer_set = caps.layer_set(config.edit.layer_set)

    z = trace.latents[-1].clone()
    replaced_calls = 0
    for i, t in enumerate(schedule.reverse_timesteps):
        step = i + 1
        to_replace = tuple(
            lid for lid in layer_set if kv_replacement_policy(step, lid, config.edit, layer_set)
        )
        eps_by_branch: Dict[str, torch.Tensor] = {}
        for branch, enc in ((COND, cond), (UNCOND, uncond)):
            instr = None
            if to_replace:
                override = {lid: trace.kv_cache.get(t, lid, branch) for lid in to_replace}
                instr = InstrumentationSpec(kv_override=override)
            with torch.no_grad():
                out = backbone.denoise(z, t, enc, instr)
            replaced_calls += len(out.replaced_layers)
            eps_by_branch[branch] = out.noise_prediction
        s = schedule.guidance_scale
        eps = eps_by_branch[UNCOND] + s * (eps_by_branch[COND] - eps_by_branch[UNCOND])
        z = LatentTensor(schedule.reverse_step(eps, t, z.data), step_tag=max(schedule.prev_timestep(t), 0))

    return EditResult(
        edited_image=backbone.decode_latent(z),
        trace_ref="",
        replaced_call_count=replaced_calls,
        config_snapshot=config.to_dict(),
    )


def _to_png(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def _heatmap_png(path: Path, heatmap: TokenHeatmap) -> None:
    from PIL import Image

    arr = (np.asarray(heatmap.data, dtype=np.float64) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def run_edit(
    request: EditRequest,
    backbone: Backbone,
    config: Optional[Config] = None,
    artifact_root: str | Path = "runs",
) -> Tuple[EditResult, Path]:
    """invert + edit, persisting the full diagnostics bundle under runs/<run_id>/."""
    base = config or Config()
    cfg = base.merged(request.overrides)
    run_id = time.strftime("%Y%m%d-%H%M%S") + "-" + uuid.uuid4().hex[:8]
    run_dir = Path(artifact_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=False)

    trace = invert(request, backbone, cfg)
    result = edit(trace, request, backbone, cfg)
    result.trace_ref = run_id

    _to_png(run_dir / "input.png", request.image)
    _to_png(run_dir / "edited.png", result.edited_image)
    if trace.masks is not None:
        mask_dir = run_dir / "masks"
        mask_dir.mkdir()
        for name in ("target", "source", "edge", "background"):
            (mask_dir / f"{name}.png").write_bytes(mask_to_png_bytes(getattr(trace.masks, name)))
    if trace.heatmap_at_update is not None:
        _heatmap_png(run_dir / "heatmap.png", trace.heatmap_at_update)
    write_loss_log(trace.loss_log, run_dir / "loss_log.csv")
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    save_kv_cache(trace.kv_cache, run_dir / "trace.kv")
    (run_dir / "result.json").write_text(json.dumps({
        "run_id": run_id,
        "replaced_call_count": result.replaced_call_count,
        "denoiser_calls": backbone.call_count,
        "update_steps_run": list(trace.update_steps_run),
        "seed": request.seed,
        "inversion_prompt": request.inversion_prompt,
        "editing_prompt": request.editing_prompt,
        "object_word": request.object_word,
        "target_box": dataclasses.asdict(request.target_box),
    }, indent=2))
    return result, run_dir
