"""Manifest-level evaluation reports.

Joins a ground-truth manifest with a prediction manifest image by image,
pools detection outcomes per difficulty subset, and reports average
precision across IoU thresholds, width/length percentage errors
(strict and loose), and the divergence between predicted and true
width/length distributions.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .dataset_io import DatasetManifest, FiberRecord, ImageRecord, load_mask_png
from .geometry import rasterize_fiber

MAPE_MODES = ("strict", "loose", "both")


@dataclass(frozen=True)
class EvaluationConfig:
    iou_thresholds: tuple = metrics.DEFAULT_IOU_THRESHOLDS
    duplicate_policy: str = "paper"
    mape_mode: str = "both"
    histogram_bins: int = 20
    mape_bbox_threshold: float = 0.5
    collect_histograms: bool = False

    def __post_init__(self):
        if not self.iou_thresholds:
            raise ValueError("need at least one IoU threshold")
        if self.duplicate_policy not in metrics.DUPLICATE_POLICIES:
            raise ValueError(f"duplicate_policy must be one of {metrics.DUPLICATE_POLICIES}")
        if self.mape_mode not in MAPE_MODES:
            raise ValueError(f"mape_mode must be one of {MAPE_MODES}")
        if self.histogram_bins < 1:
            raise ValueError("histogram_bins must be >= 1")


def _record_masks(record: ImageRecord, base_dir: Path | None) -> list[np.ndarray]:
    masks = []
    for fiber_rec in record.fibers:
        if fiber_rec.mask_path is not None:
            if base_dir is None:
                raise ValueError(f"{record.file_name}: mask_path given but no base directory")
            masks.append(load_mask_png(Path(base_dir) / fiber_rec.mask_path))
        else:
            masks.append(rasterize_fiber(fiber_rec.to_fiber(),
                                         record.width_px, record.height_px))
    return masks


def _score(fiber_rec: FiberRecord) -> float:
    return 1.0 if fiber_rec.score is None else float(fiber_rec.score)


@dataclass
class _ImageEvaluation:
    subset: str
    gt_records: list[FiberRecord]
    det_records: list[FiberRecord]
    det_scores: list[float]
    mask_ious: np.ndarray
    bbox_ious: np.ndarray


def _evaluate_image(gt_rec: ImageRecord, pred_rec: ImageRecord | None,
                    gt_dir: Path | None, pred_dir: Path | None) -> _ImageEvaluation:
    gt_masks = _record_masks(gt_rec, gt_dir)
    if pred_rec is None:
        det_masks, det_records = [], []
    else:
        if (pred_rec.width_px, pred_rec.height_px) != (gt_rec.width_px, gt_rec.height_px):
            raise ValueError(f"{gt_rec.file_name}: prediction canvas differs from ground truth")
        det_masks = _record_masks(pred_rec, pred_dir)
        det_records = list(pred_rec.fibers)
    gt_boxes = [metrics.mask_bbox(m) for m in gt_masks]
    det_boxes = [metrics.mask_bbox(m) for m in det_masks]
    bbox_ious = np.zeros((len(det_masks), len(gt_masks)))
    for i, db in enumerate(det_boxes):
        for j, gb in enumerate(gt_boxes):
            bbox_ious[i, j] = metrics.bbox_iou(db, gb)
    return _ImageEvaluation(
        subset=gt_rec.flags.key(),
        gt_records=list(gt_rec.fibers),
        det_records=det_records,
        det_scores=[_score(f) for f in det_records],
        mask_ious=metrics.iou_matrix(det_masks, gt_masks),
        bbox_ious=bbox_ious,
    )


def _subset_report(images: list[_ImageEvaluation], config: EvaluationConfig) -> dict:
    total_gts = sum(len(img.gt_records) for img in images)
    total_dets = sum(len(img.det_records) for img in images)

    ap_by_threshold = {}
    for threshold in config.iou_thresholds:
        pooled = []
        for img in images:
            outcomes = metrics.match_outcomes(img.mask_ious, img.det_scores,
                                              threshold, config.duplicate_policy)
            pooled.extend((o[1], o[2]) for o in outcomes)
        curve = metrics.pr_curve_from_outcomes(pooled, total_gts)
        ap_by_threshold[float(threshold)] = metrics.average_precision(curve)
    map_value = float(np.mean(list(ap_by_threshold.values())))

    width_errors, length_errors = [], []
    unmatched_gts = 0
    for img in images:
        outcomes = metrics.match_outcomes(img.bbox_ious, img.det_scores,
                                          config.mape_bbox_threshold,
                                          config.duplicate_policy)
        matched = {o[3] for o in outcomes if o[2] == "tp"}
        for det_idx, _, kind, gt_idx, _ in outcomes:
            if kind != "tp":
                continue
            det = img.det_records[det_idx]
            gt = img.gt_records[gt_idx]
            width_errors.append(metrics.percentage_error(det.width_px, gt.width_px))
            length_errors.append(metrics.percentage_error(det.length_px, gt.length_px))
        unmatched_gts += len(img.gt_records) - len(matched)

    def mape_entry(errors):
        if len(errors) + unmatched_gts == 0:
            return {"strict": None, "loose": None}
        entry = {}
        if config.mape_mode in ("strict", "both"):
            entry["strict"] = metrics.mape(errors, unmatched_gts, "strict")
        if config.mape_mode in ("loose", "both"):
            entry["loose"] = metrics.mape(errors, unmatched_gts, "loose")
        return entry

    def divergence(attr):
        gt_values = [getattr(f, attr) for img in images for f in img.gt_records]
        det_values = [getattr(f, attr) for img in images for f in img.det_records]
        det_weights = [s for img in images for s in img.det_scores]
        if not gt_values or not det_values or sum(det_weights) <= 0:
            return None, None
        pooled = gt_values + det_values
        value_range = (min(pooled), max(pooled))
        p = metrics.weighted_histogram(gt_values, np.ones(len(gt_values)),
                                       config.histogram_bins, value_range,
                                       weight_policy="uniform")
        q = metrics.weighted_histogram(det_values, det_weights,
                                       config.histogram_bins, value_range)
        histograms = {
            "bin_edges": p.bin_edges.tolist(),
            "gt_density": p.densities.tolist(),
            "pred_density": q.densities.tolist(),
        }
        try:
            return metrics.kl_divergence(p, q), histograms
        except metrics.DivergenceUndefinedError:
            return None, histograms

    kl_width, hist_width = divergence("width_px")
    kl_length, hist_length = divergence("length_px")
    report = metrics.APReport(ap_by_threshold=ap_by_threshold, map_value=map_value)
    out = {
        "image_count": len(images),
        "gt_fiber_count": total_gts,
        "detection_count": total_dets,
        "ap_by_threshold": {f"{t:.2f}": v for t, v in ap_by_threshold.items()},
        "map": map_value,
        "ap50": report.ap50,
        "ap75": report.ap75,
        "mape": {"width": mape_entry(width_errors), "length": mape_entry(length_errors)},
        "kl_divergence": {"width": kl_width, "length": kl_length},
    }
    if config.collect_histograms:
        out["histograms"] = {"width": hist_width, "length": hist_length}
    return out


def evaluate_manifests(gt_manifest: DatasetManifest, pred_manifest: DatasetManifest,
                       gt_dir=None, pred_dir=None,
                       config: EvaluationConfig | None = None) -> dict:
    """Full evaluation report, overall and per difficulty subset.

    Prediction records are joined to ground-truth records by file name;
    images without predictions count as all-miss. Prediction files for
    unknown images are rejected.
    """
    config = config or EvaluationConfig()
    gt_by_name = {rec.file_name: rec for rec in gt_manifest.images}
    extra = [rec.file_name for rec in pred_manifest.images
             if rec.file_name not in gt_by_name]
    if extra:
        raise ValueError(f"predictions reference unknown images: {extra[:3]}")
    pred_by_name = {rec.file_name: rec for rec in pred_manifest.images}

    evaluated = [
        _evaluate_image(rec, pred_by_name.get(rec.file_name), gt_dir, pred_dir)
        for rec in gt_manifest.images
    ]
    subsets: dict[str, list[_ImageEvaluation]] = {}
    for img in evaluated:
        subsets.setdefault(img.subset, []).append(img)

    return {
        "config": {
            "iou_thresholds": [float(t) for t in config.iou_thresholds],
            "duplicate_policy": config.duplicate_policy,
            "mape_mode": config.mape_mode,
            "histogram_bins": config.histogram_bins,
            "mape_bbox_threshold": config.mape_bbox_threshold,
        },
        "overall": _subset_report(evaluated, config),
        "subsets": {key: _subset_report(imgs, config)
                    for key, imgs in sorted(subsets.items())},
    }
