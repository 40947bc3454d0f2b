"""Command line interface: edit one image, evaluate a dataset, run ablation
sweeps, or serve the HTTP API.

Exit codes: 0 success, 2 validation/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import create_backbone
from .config import Config, load_config
from .evaluation import (
    ABLATION_KINDS,
    ClipEmbeddingScorer,
    DatasetError,
    StubDetector,
    TokenOverlapScorer,
    evaluate_pairs,
    load_dataset,
    run_ablation,
    write_report,
)
from .pipeline import EditRequest, PipelineError, run_edit
from .regions import BoundingBox, RegionError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _load_image(path: str, size: int) -> np.ndarray:
    from PIL import Image

    pil = Image.open(path).convert("RGB")
    if pil.size != (size, size):
        pil = pil.resize((size, size), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float64) / 255.0


def _native_size(config: Config) -> int:
    if config.backbone.kind == "toy":
        from .backbone.toy import IMAGE_SIZE

        return IMAGE_SIZE
    return 512


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moveact")
    sub = parser.add_subparsers(dest="command", required=True)

    p_edit = sub.add_parser("edit", help="run one box-targeted edit")
    p_edit.add_argument("--image", required=True)
    p_edit.add_argument("--inv-prompt", required=True)
    p_edit.add_argument("--edit-prompt", required=True)
    p_edit.add_argument("--object", required=True)
    p_edit.add_argument("--bbox", required=True, help="x0,y0,x1,y1 normalized")
    p_edit.add_argument("--config", default=None)
    p_edit.add_argument("--seed", type=int, default=0)
    p_edit.add_argument("--backbone", choices=("real", "toy"), default=None)
    p_edit.add_argument("--out", default="runs")
    p_edit.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override, e.g. objective.iterations=10")

    p_eval = sub.add_parser("eval", help="run the pipeline over a dataset and report metrics")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--backbone", choices=("real", "toy"), default=None)
    p_eval.add_argument("--scorer", choices=("mock", "clip", "none"), default="none",
                        help="'none' marks the text-image score unavailable rather than zero")
    p_eval.add_argument("--strict", action="store_true")

    p_abl = sub.add_parser("ablate", help="sweep one hyperparameter over a dataset")
    p_abl.add_argument("--dataset", required=True)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--kind", required=True)
    p_abl.add_argument("--values", required=True, help="comma separated")
    p_abl.add_argument("--config", default=None)
    p_abl.add_argument("--backbone", choices=("real", "toy"), default=None)
    p_abl.add_argument("--scorer", choices=("mock", "clip", "none"), default="none",
                       help="'none' marks the text-image score unavailable rather than zero")
    p_abl.add_argument("--strict", action="store_true")

    p_serve = sub.add_parser("serve", help="start the HTTP job service")
    p_serve.add_argument("--config", default=None)
    p_serve.add_argument("--port", type=int, default=None)

    return parser


def _config_from_args(args) -> Config:
    config = load_config(getattr(args, "config", None))
    if getattr(args, "backbone", None):
        config.backbone.kind = args.backbone
    for item in getattr(args, "set", []):
        key, _, value = item.partition("=")
        section, _, name = key.partition(".")
        if not name or not value:
            raise ValueError(f"bad --set {item!r}; expected SECTION.KEY=VALUE")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        config = config.merged({section: {name: parsed}})
    return config


def _make_scorer(name: str):
    if name == "mock":
        return TokenOverlapScorer()
    if name == "clip":
        return ClipEmbeddingScorer()
    return None


def cmd_edit(args) -> int:
    try:
        config = _config_from_args(args)
        box = BoundingBox.from_string(args.bbox)
        image = _load_image(args.image, _native_size(config))
        request = EditRequest(
            image=image, inversion_prompt=args.inv_prompt, editing_prompt=args.edit_prompt,
            object_word=args.object, target_box=box, seed=args.seed,
        )
    except (RegionError, PipelineError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        backbone = create_backbone(config.backbone)
        result, run_dir = run_edit(request, backbone, config, args.out)
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(run_dir)
    return EXIT_OK


def _run_fn(config: Config, backbone, artifact_root: Path):
    size = _native_size(config)

    def run(pair, overrides: dict) -> np.ndarray:
        request = EditRequest(
            image=_load_image(pair.image_path, size),
            inversion_prompt=pair.inversion_prompt,
            editing_prompt=pair.editing_prompt,
            object_word=pair.object_word,
            target_box=pair.bbox,
            overrides=overrides,
        )
        result, _ = run_edit(request, backbone, config, artifact_root)
        return result.edited_image

    return run


def cmd_eval(args) -> int:
    try:
        config = _config_from_args(args)
        pairs = load_dataset(args.dataset)
        scorer = _make_scorer(args.scorer)
    except (DatasetError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    backbone = create_backbone(config.backbone)
    out_dir = Path(args.out)
    run = _run_fn(config, backbone, out_dir / "runs")
    edited = {}
    failures = []
    for pair in pairs:
        try:
            edited[pair.id] = run(pair, {})
        except Exception as exc:
            failures.append((pair.id, f"{type(exc).__name__}: {exc}"))
    done = [p for p in pairs if p.id in edited]
    report = evaluate_pairs(done, edited, scorer, StubDetector())
    write_report(report, out_dir)
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(
            [{"id": i, "error": e} for i, e in failures], indent=2))
        print(f"{len(failures)} item(s) failed", file=sys.stderr)
        if args.strict:
            return EXIT_RUNTIME
    print(out_dir)
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        config = _config_from_args(args)
        if args.kind not in ABLATION_KINDS:
            raise ValueError(f"unknown ablation kind {args.kind!r}; one of {sorted(ABLATION_KINDS)}")
        raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
        if args.kind == "layer_set":
            values = raw_values
            bad = [v for v in values if v not in ("decoder", "encoder", "all")]
            if bad:
                raise ValueError(f"invalid layer_set values {bad}")
        else:
            values = [int(v) for v in raw_values]
        pairs = load_dataset(args.dataset)
        scorer = _make_scorer(args.scorer)
    except (DatasetError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    backbone = create_backbone(config.backbone)
    out_dir = Path(args.out)
    report = run_ablation(
        args.kind, values, pairs,
        _run_fn(config, backbone, out_dir / "runs"),
        scorer=scorer, detector=StubDetector(),
    )
    write_report(report, out_dir)
    n_failed = sum(len(g.failures) for g in report.groups)
    if n_failed:
        print(f"{n_failed} item run(s) failed", file=sys.stderr)
        if args.strict:
            return EXIT_RUNTIME
    print(out_dir)
    return EXIT_OK


def cmd_serve(args) -> int:  # pragma: no cover - long-running server
    from .service import serve

    config = load_config(args.config)
    if args.port is not None:
        config.service.port = args.port
    serve(config)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handler = {
        "edit": cmd_edit,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "serve": cmd_serve,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
