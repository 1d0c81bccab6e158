"""Command-line interface.

Subcommands cover the full workflow: annotate single-fiber images, render
synthetic datasets, normalize keypoint chains (resample / order), prune
predicted keypoints, split datasets, pick the keypoint count, and
evaluate predictions against ground truth. Seeded commands are
deterministic: identical invocations produce byte-identical output files
regardless of worker count.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset_io, evaluation, metrics, synthesis
from .annotation import AnnotationConfig, NoFiberError, annotate_fiber
from .geometry import (
    DEFAULT_K_RANGE,
    DEFAULT_KEYPOINT_COUNT,
    DEFAULT_PERCENTILE,
    KeypointChain,
    optimal_keypoint_count,
    order_keypoints,
    rasterize_fiber,
    resample_keypoints,
)
from .pruning import Detection, prune_keypoints


def _parse_scalar(text: str):
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_config_file(path) -> dict:
    """Flat `key = value` files; commas make tuples, '#' starts a comment."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            value = value.strip()
            if "," in value:
                values[key.strip()] = tuple(_parse_scalar(v.strip())
                                            for v in value.split(","))
            else:
                values[key.strip()] = _parse_scalar(value)
    return values


def _synth_config(args) -> synthesis.SynthConfig:
    overrides = parse_config_file(args.config) if args.config else {}
    known = {f.name for f in dataclasses.fields(synthesis.SynthConfig)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    if args.seed is not None:
        overrides["seed"] = args.seed
    return synthesis.SynthConfig(**overrides)


def _parse_thresholds(text: str) -> list[float]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError("threshold range must look like start:step:stop")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError("threshold range must be increasing")
        values = []
        value = start
        while value <= stop + 1e-9:
            values.append(round(value, 10))
            value += step
        return values
    return [float(p) for p in text.split(",") if p.strip()]


def _load_gray(path):
    return dataset_io.load_gray_png(path)


def cmd_annotate(args) -> int:
    image_dir = Path(args.directory)
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise ValueError(f"no PNG images found in {image_dir}")
    config = AnnotationConfig(denoise_radius=args.denoise_radius,
                              polarity=args.polarity,
                              keypoint_count=args.keypoints)
    overlay_dir = Path(args.overlay_dir) if args.overlay_dir else None
    if overlay_dir:
        overlay_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for path in files:
        image = _load_gray(path)
        height, width = image.shape
        try:
            fiber, report = annotate_fiber(image, config)
        except NoFiberError as exc:
            print(f"{path.name}: skipped ({exc})", file=sys.stderr)
            continue
        note = f" flags={','.join(report.flags)}" if report.flags else ""
        print(f"{path.name}: width={fiber.width:.2f}px length={fiber.length:.1f}px{note}")
        records.append(dataset_io.ImageRecord(
            file_name=path.name, width_px=width, height_px=height,
            flags=dataset_io.SubsetFlags(),
            fibers=[dataset_io.FiberRecord.from_fiber(fiber)],
        ))
        if overlay_dir:
            mask = rasterize_fiber(fiber, width, height)
            overlay = np.stack([image] * 3, axis=-1).astype(np.float64)
            overlay[mask] = 0.5 * overlay[mask] + 0.5 * np.array([255.0, 64.0, 64.0])
            from PIL import Image
            Image.fromarray(np.clip(np.rint(overlay), 0, 255).astype(np.uint8),
                            mode="RGB").save(overlay_dir / path.name, format="PNG")

    manifest = dataset_io.DatasetManifest(provenance="semiautomatic", images=records)
    dataset_io.save_annotations(manifest, args.out)
    print(f"annotated {len(records)}/{len(files)} images -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    manifest = synthesis.generate_dataset(cfg, args.count, args.out, workers=args.workers)
    fibers = sum(len(rec.fibers) for rec in manifest.images)
    print(f"wrote {len(manifest.images)} scenes / {fibers} fibers -> {args.out}")
    return 0


def _rewrite_fibers(args, transform) -> int:
    manifest = dataset_io.load_annotations(args.input)
    for rec in manifest.images:
        rec.fibers = [transform(f) for f in rec.fibers]
    dataset_io.save_annotations(manifest, args.output)
    print(f"wrote {args.output}")
    return 0


def cmd_resample(args) -> int:
    def transform(f: dataset_io.FiberRecord) -> dataset_io.FiberRecord:
        chain = resample_keypoints(KeypointChain(f.keypoints), args.keypoints)
        return dataclasses.replace(f, keypoints=chain.points.copy())

    return _rewrite_fibers(args, transform)


def cmd_order(args) -> int:
    def transform(f: dataset_io.FiberRecord) -> dataset_io.FiberRecord:
        chain = order_keypoints(KeypointChain(f.keypoints))
        return dataclasses.replace(f, keypoints=chain.points.copy())

    return _rewrite_fibers(args, transform)


def cmd_prune(args) -> int:
    manifest = dataset_io.load_annotations(args.pred)
    pred_dir = Path(args.pred_dir) if args.pred_dir else Path(args.pred).parent
    if args.gt:
        gt = dataset_io.load_annotations(args.gt)
        gt_sizes = {r.file_name: (r.width_px, r.height_px) for r in gt.images}
        for rec in manifest.images:
            if rec.file_name in gt_sizes and \
                    gt_sizes[rec.file_name] != (rec.width_px, rec.height_px):
                raise ValueError(f"{rec.file_name}: canvas differs from ground truth")

    pruned = skipped = 0
    for rec in manifest.images:
        for f in rec.fibers:
            fiber = f.to_fiber()
            if f.mask_path is not None:
                mask = dataset_io.load_mask_png(pred_dir / f.mask_path)
            else:
                mask = rasterize_fiber(fiber, rec.width_px, rec.height_px)
            score = 1.0 if f.score is None else f.score
            result = prune_keypoints(Detection(fiber, mask, score))
            f.keypoints_pruned = result.keypoints.points.copy()
            if result.skipped:
                skipped += 1
            elif result.steps:
                pruned += 1
    dataset_io.save_annotations(manifest, args.out)
    print(f"pruned {pruned} fibers ({skipped} skipped) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    gt = dataset_io.load_annotations(args.gt)
    pred = dataset_io.load_annotations(args.pred)
    config = evaluation.EvaluationConfig(
        iou_thresholds=tuple(_parse_thresholds(args.thresholds)),
        duplicate_policy=args.duplicate_policy,
        mape_mode=args.mape,
        histogram_bins=args.bins,
        collect_histograms=args.histograms is not None,
    )
    report = evaluation.evaluate_manifests(
        gt, pred,
        gt_dir=Path(args.gt).parent,
        pred_dir=Path(args.pred_dir) if args.pred_dir else Path(args.pred).parent,
        config=config,
    )
    if args.histograms is not None:
        hist_dir = Path(args.histograms)
        hist_dir.mkdir(parents=True, exist_ok=True)
        sections = {"overall": report["overall"], **report["subsets"]}
        for name, section in sections.items():
            hists = section.pop("histograms", None)
            if not hists:
                continue
            safe = name.replace("=", "-").replace(",", "_")
            for quantity, data in hists.items():
                if data is not None:
                    with open(hist_dir / f"{safe}_{quantity}.json", "w",
                              encoding="utf-8") as fh:
                        json.dump(data, fh, indent=2)
                        fh.write("\n")
    out = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(out + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(out)
    overall = report["overall"]
    parts = [f"mAP={overall['map']:.4f}"]
    for label in ("ap50", "ap75"):
        if overall[label] is not None:
            parts.append(f"{label.upper()}={overall[label]:.4f}")
    print("overall: " + " ".join(parts), file=sys.stderr)
    return 0


def cmd_split(args) -> int:
    manifest = dataset_io.load_annotations(args.input)
    out = dataset_io.split_dataset(manifest, train_fraction=args.fraction, rng=args.seed)
    dataset_io.save_annotations(out, args.output)
    train = sum(rec.split == "train" for rec in out.images)
    test = sum(rec.split == "test" for rec in out.images)
    print(f"split {train} train / {test} test -> {args.output}")
    return 0


def cmd_bic(args) -> int:
    manifest = dataset_io.load_annotations(args.input)
    chains = [KeypointChain(f.keypoints) for rec in manifest.images for f in rec.fibers]
    if not chains:
        raise ValueError("no fibers in the annotation file")
    best = optimal_keypoint_count(chains, k_range=(args.min, args.max),
                                  percentile=args.percentile)
    print(best)
    if args.out:
        doc = {"optimal_keypoint_count": best, "k_min": args.min, "k_max": args.max,
               "percentile": args.percentile, "fiber_count": len(chains)}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fiberlab",
                                     description="Fiber morphology toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="annotate single-fiber images in a directory")
    p.add_argument("directory")
    p.add_argument("--denoise-radius", type=int, default=1)
    p.add_argument("--polarity", choices=("bright", "dark"), default="bright")
    p.add_argument("--keypoints", type=int, default=DEFAULT_KEYPOINT_COUNT)
    p.add_argument("--out", default="annotations.json")
    p.add_argument("--overlay-dir", default=None)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("resample", help="resample keypoint chains to a fixed count")
    p.add_argument("--keypoints", type=int, default=DEFAULT_KEYPOINT_COUNT)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("order", help="canonically order keypoint chains")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_order)

    p = sub.add_parser("prune", help="prune predicted keypoints")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", default=None, help="optional canvas cross-check")
    p.add_argument("--pred-dir", default=None, help="base directory for mask paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("evaluate", help="evaluate predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--thresholds", default="0.5:0.05:0.95")
    p.add_argument("--duplicate-policy", choices=metrics.DUPLICATE_POLICIES,
                   default="paper")
    p.add_argument("--mape", choices=evaluation.MAPE_MODES, default="both")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--pred-dir", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--histograms", default=None, help="directory for histogram data")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("split", help="assign train/test splits per subset")
    p.add_argument("--fraction", type=float, default=dataset_io.DEFAULT_TRAIN_FRACTION)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("bic", help="select the optimal keypoint count")
    p.add_argument("--min", type=int, default=DEFAULT_K_RANGE[0])
    p.add_argument("--max", type=int, default=DEFAULT_K_RANGE[1])
    p.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bic)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
