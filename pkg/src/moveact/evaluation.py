"""Evaluation harness: condition-pair dataset, text-image score and box-AP
metrics with pluggable scorers/detectors, and the four ablation sweeps.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .regions import BoundingBox

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ABLATION_KINDS = {
    "update_step": ("objective", "update_step_index", 35),
    "iterations": ("objective", "iterations", 50),
    "start_S": ("edit", "S", 7),
    "layer_set": ("edit", "layer_set", "decoder"),
}


class DatasetError(ValueError):
    pass


class MetricUnavailableError(RuntimeError):
    """The requested scorer/detector is not available; never report zero instead."""


@dataclass(frozen=True)
class ConditionPair:
    id: str
    image_path: str
    inversion_prompt: str
    editing_prompt: str
    object_word: str
    action_word: str
    bbox: BoundingBox


def load_dataset(path) -> List[ConditionPair]:
    """Parse a JSONL dataset; any malformed row fails the load with its line number."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    pairs: List[ConditionPair] = []
    errors: List[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                if row.get("schema_version") != SCHEMA_VERSION:
                    raise DatasetError(f"schema_version must be {SCHEMA_VERSION}")
                bbox = row["bbox"]
                pairs.append(ConditionPair(
                    id=str(row["id"]),
                    image_path=str(row["image_path"]),
                    inversion_prompt=str(row["inversion_prompt"]),
                    editing_prompt=str(row["editing_prompt"]),
                    object_word=str(row["object_word"]),
                    action_word=str(row["action_word"]),
                    bbox=BoundingBox(*(float(v) for v in bbox)),
                ))
            except Exception as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise DatasetError("malformed dataset rows:\n" + "\n".join(errors))
    if not pairs:
        logger.warning("dataset %s is empty", path)
    return pairs


# ----------------------------------------------------------------- scorers

class TextImageScorer(Protocol):
    def score(self, image, text: str) -> float: ...
    def identity(self) -> str: ...


class TokenOverlapScorer:
    """Desk-scale mock: fraction of the text's words present in the image stub.

    Accepts a string stub (unit tests) or an array whose associated label was
    registered via `tag`.
    """

    def __init__(self):
        self._tags: Dict[int, str] = {}

    def tag(self, image: np.ndarray, label: str) -> np.ndarray:
        self._tags[id(image)] = label
        return image

    def _label(self, image) -> str:
        if isinstance(image, str):
            return image
        return self._tags.get(id(image), "")

    def score(self, image, text: str) -> float:
        words = [w for w in text.lower().split() if w]
        if not words:
            return 0.0
        stub = set(self._label(image).lower().split())
        return sum(w in stub for w in words) / len(words)

    def identity(self) -> str:
        return "mock-token-overlap"


class ClipEmbeddingScorer:
    """Cosine similarity from a pretrained CLIP checkpoint (integration tier)."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover
            raise MetricUnavailableError("transformers is required for the CLIP scorer") from exc
        self.model_name = model_name
        self.model = CLIPModel.from_pretrained(model_name)
        self.processor = CLIPProcessor.from_pretrained(model_name)

    def score(self, image, text: str) -> float:  # pragma: no cover - needs weights
        import torch

        inputs = self.processor(
            text=[text], images=[(np.asarray(image) * 255).astype(np.uint8)],
            return_tensors="pt", padding=True,
        )
        with torch.no_grad():
            out = self.model(**inputs)
        img = out.image_embeds / out.image_embeds.norm(dim=-1, keepdim=True)
        txt = out.text_embeds / out.text_embeds.norm(dim=-1, keepdim=True)
        return float((img * txt).sum())

    def identity(self) -> str:
        return f"clip:{self.model_name}"


def clip_score(image, text: str, scorer: Optional[TextImageScorer]) -> float:
    if scorer is None:
        raise MetricUnavailableError("no text-image scorer configured")
    return scorer.score(image, text)


# ---------------------------------------------------------------- detector

@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: str
    confidence: float


@dataclass(frozen=True)
class GroundTruth:
    box: BoundingBox
    label: str


class ObjectDetector(Protocol):
    def detect(self, image) -> List[Detection]: ...
    def identity(self) -> str: ...


class StubDetector:
    """Mock detector returning preconfigured detections keyed by item id."""

    def __init__(self, detections: Optional[Dict[str, List[Detection]]] = None):
        self.detections = detections or {}

    def detect_for(self, item_id: str) -> List[Detection]:
        return self.detections.get(item_id, [])

    def detect(self, image) -> List[Detection]:
        return []

    def identity(self) -> str:
        return "mock-stub-detector"


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix0, iy0 = max(a.x0, b.x0), max(a.y0, b.y0)
    ix1, iy1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if ix0 >= ix1 or iy0 >= iy1:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    return inter / (area_a + area_b - inter)


def ap50(items: Sequence[Tuple[Sequence[Detection], GroundTruth]]) -> float:
    """Average precision at IoU 0.5, all-point interpolation, range [0, 100].

    Each item carries one ground-truth box for its own object class; every
    prediction across the dataset is ranked by confidence and greedily matched
    to its item's ground truth.
    """
    if not items:
        raise ValueError("ap50 requires a nonempty item list")
    ranked = []
    for item_idx, (preds, gt) in enumerate(items):
        for det in preds:
            ranked.append((det.confidence, item_idx, det))
    if not ranked:
        return 0.0
    ranked.sort(key=lambda r: -r[0])
    matched = set()
    tps: List[int] = []
    for _, item_idx, det in ranked:
        gt = items[item_idx][1]
        hit = (
            det.label == gt.label
            and box_iou(det.box, gt.box) >= 0.5
            and item_idx not in matched
        )
        if hit:
            matched.add(item_idx)
        tps.append(1 if hit else 0)
    n_gt = len(items)
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum([1 - t for t in tps])
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope, then area under PR over all recall change points
    ap = 0.0
    prev_r = 0.0
    for i in range(len(ranked)):
        if tps[i]:
            p_at = precision[i:].max()
            ap += (recall[i] - prev_r) * p_at
            prev_r = recall[i]
    return float(ap * 100.0)


# ------------------------------------------------------------------ report

@dataclass
class PerItemResult:
    id: str
    clip: Optional[float]
    detections: List[Detection]
    gt: GroundTruth
    iou: float  # best IoU of a correct-class detection against the target box


@dataclass
class MetricReport:
    clip_score_mean: Optional[float]
    clip_score_stderr: Optional[float]
    ap50: float
    ap50_stderr: float
    n: int
    per_item: List[PerItemResult]
    scorer_identity: str = "unavailable"
    detector_identity: str = "unavailable"

    def to_dict(self) -> dict:
        return {
            "clip_score_mean": self.clip_score_mean,
            "clip_score_stderr": self.clip_score_stderr,
            "ap50": self.ap50,
            "ap50_stderr": self.ap50_stderr,
            "n": self.n,
            "scorer": self.scorer_identity,
            "detector": self.detector_identity,
            "per_item": [
                {
                    "id": r.id,
                    "clip": r.clip,
                    "iou": r.iou,
                    "detections": [
                        {"box": [d.box.x0, d.box.y0, d.box.x1, d.box.y1],
                         "label": d.label, "confidence": d.confidence}
                        for d in r.detections
                    ],
                    "gt": {"box": [r.gt.box.x0, r.gt.box.y0, r.gt.box.x1, r.gt.box.y1],
                           "label": r.gt.label},
                }
                for r in self.per_item
            ],
        }


def make_report(
    per_item: List[PerItemResult],
    scorer_identity: str = "unavailable",
    detector_identity: str = "unavailable",
    bootstrap_samples: int = 200,
    bootstrap_seed: int = 0,
) -> MetricReport:
    n = len(per_item)
    clips = [r.clip for r in per_item if r.clip is not None]
    clip_mean = sum(clips) / len(clips) if clips else None
    clip_stderr = None
    if len(clips) > 1:
        var = sum((c - clip_mean) ** 2 for c in clips) / (len(clips) - 1)
        clip_stderr = math.sqrt(var / len(clips))
    ap_items = [(tuple(r.detections), r.gt) for r in per_item]
    ap = ap50(ap_items) if ap_items else 0.0
    ap_stderr = 0.0
    if n > 1:
        rng = np.random.default_rng(bootstrap_seed)
        samples = []
        for _ in range(bootstrap_samples):
            idx = rng.integers(0, n, size=n)
            samples.append(ap50([ap_items[i] for i in idx]))
        ap_stderr = float(np.std(samples, ddof=1))
    return MetricReport(
        clip_score_mean=clip_mean, clip_score_stderr=clip_stderr,
        ap50=ap, ap50_stderr=ap_stderr, n=n, per_item=per_item,
        scorer_identity=scorer_identity, detector_identity=detector_identity,
    )


def evaluate_pairs(
    pairs: Sequence[ConditionPair],
    edited_images: Dict[str, np.ndarray],
    scorer: Optional[TextImageScorer],
    detector,
) -> MetricReport:
    """Score already-edited images: CLIP against the editing prompt, detections
    against the requested target box."""
    per_item: List[PerItemResult] = []
    for pair in pairs:
        image = edited_images[pair.id]
        clip = None
        if scorer is not None:
            clip = scorer.score(image, pair.editing_prompt)
        if isinstance(detector, StubDetector):
            dets = detector.detect_for(pair.id)
        else:
            dets = detector.detect(image) if detector is not None else []
        gt = GroundTruth(box=pair.bbox, label=pair.object_word)
        best_iou = max((box_iou(d.box, pair.bbox) for d in dets if d.label == gt.label), default=0.0)
        per_item.append(PerItemResult(id=pair.id, clip=clip, detections=list(dets), gt=gt, iou=best_iou))
    return make_report(
        per_item,
        scorer_identity=scorer.identity() if scorer else "unavailable",
        detector_identity=detector.identity() if detector else "unavailable",
    )


# ---------------------------------------------------------------- ablation

@dataclass
class AblationGroup:
    value: object
    is_paper_default: bool
    report: Optional[MetricReport]
    failures: List[Tuple[str, str]] = field(default_factory=list)  # (pair id, error)


@dataclass
class AblationReport:
    kind: str
    groups: List[AblationGroup]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "groups": [
                {
                    "value": g.value,
                    "is_paper_default": g.is_paper_default,
                    "report": g.report.to_dict() if g.report else None,
                    "failures": [{"id": i, "error": e} for i, e in g.failures],
                }
                for g in self.groups
            ],
        }


def run_ablation(
    kind: str,
    values: Sequence,
    dataset: Sequence[ConditionPair],
    run_fn: Callable[[ConditionPair, dict], np.ndarray],
    scorer: Optional[TextImageScorer] = None,
    detector=None,
) -> AblationReport:
    """One pipeline run per (value, pair); per-item failures are recorded and
    the sweep continues."""
    if kind not in ABLATION_KINDS:
        raise ValueError(f"unknown ablation kind {kind!r}; one of {sorted(ABLATION_KINDS)}")
    section, key, default = ABLATION_KINDS[kind]
    if kind == "layer_set":
        bad = [v for v in values if v not in ("decoder", "encoder", "all")]
        if bad:
            raise ValueError(f"invalid layer_set values {bad}")
    groups: List[AblationGroup] = []
    for value in values:
        edited: Dict[str, np.ndarray] = {}
        failures: List[Tuple[str, str]] = []
        for pair in dataset:
            try:
                edited[pair.id] = run_fn(pair, {section: {key: value}})
            except Exception as exc:
                failures.append((pair.id, f"{type(exc).__name__}: {exc}"))
        done = [p for p in dataset if p.id in edited]
        report = evaluate_pairs(done, edited, scorer, detector) if done else None
        groups.append(AblationGroup(
            value=value, is_paper_default=(value == default),
            report=report, failures=failures,
        ))
    return AblationReport(kind=kind, groups=groups)


def write_report(report: MetricReport | AblationReport, out_dir) -> None:
    """report.json plus a small markdown table mirroring the headline layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    lines = ["| Method | CLIP-Score | AP50 |", "|---|---|---|"]
    if isinstance(report, MetricReport):
        clip = "unavailable" if report.clip_score_mean is None else (
            f"{report.clip_score_mean:.4f} ± {report.clip_score_stderr:.4f}"
            if report.clip_score_stderr is not None else f"{report.clip_score_mean:.4f}"
        )
        lines.append(f"| this run (n={report.n}) | {clip} | {report.ap50:.2f} ± {report.ap50_stderr:.2f} |")
    else:
        for g in report.groups:
            tag = f"{report.kind}={g.value}" + (" (default)" if g.is_paper_default else "")
            if g.report is None:
                lines.append(f"| {tag} | - | - |")
                continue
            clip = "unavailable" if g.report.clip_score_mean is None else f"{g.report.clip_score_mean:.4f}"
            lines.append(f"| {tag} | {clip} | {g.report.ap50:.2f} |")
    (out / "report.md").write_text("\n".join(lines) + "\n")
