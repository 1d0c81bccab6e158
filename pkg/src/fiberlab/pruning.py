"""Detection error measures and keypoint pruning.

A detection carries redundant information: keypoints plus an independently
predicted width, length and segmentation mask. Disagreement between the
keypoint spline and the other quantities exposes bad keypoints. Pruning
removes individual keypoints while doing so improves the mask agreement
without worsening the length mismatch, then restores the original
keypoint count by resampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Fiber, KeypointChain, _rasterize_points, resample_keypoints
from ._spline import UniformCubicSpline, adaptive_arc_length


@dataclass(frozen=True, eq=False)
class Detection:
    """Predicted fiber with its segmentation mask and confidence score."""

    fiber: Fiber
    mask: np.ndarray
    score: float

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("detection mask must be 2D")
        object.__setattr__(self, "mask", mask)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


@dataclass(frozen=True)
class ErrorReport:
    length_error: float
    mask_iou: float


@dataclass(frozen=True)
class PruneStep:
    """One accepted removal: index in the chain as it was at that moment."""

    removed_index: int
    iou: float
    length_error: float


@dataclass
class PruneResult:
    keypoints: KeypointChain
    skipped: bool
    baseline_iou: float = 0.0
    baseline_length_error: float = 0.0
    steps: list[PruneStep] = field(default_factory=list)


def spline_length_error(keypoints: KeypointChain, predicted_length: float) -> float:
    """Relative mismatch |1 - spline_length / predicted_length|."""
    if predicted_length <= 0:
        raise ValueError("predicted_length must be positive")
    length = adaptive_arc_length(UniformCubicSpline(keypoints.points))
    return abs(1.0 - length / predicted_length)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two same-canvas masks; 0 for empty union."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def detect_error(detection: Detection) -> ErrorReport:
    """Length mismatch and spline-mask/head-mask agreement for a detection."""
    fiber = detection.fiber
    h, w = detection.mask.shape
    spline_mask = _rasterize_points(fiber.keypoints.points, fiber.width, w, h)
    return ErrorReport(
        length_error=spline_length_error(fiber.keypoints, fiber.length),
        mask_iou=mask_iou(spline_mask, detection.mask),
    )


def _chain_valid(points: np.ndarray) -> bool:
    return len(points) >= 2 and not np.any(np.all(points[1:] == points[:-1], axis=1))


def _length_error(points: np.ndarray, predicted: float) -> float:
    return abs(1.0 - adaptive_arc_length(UniformCubicSpline(points)) / predicted)


def prune_keypoints(detection: Detection) -> PruneResult:
    """Remove keypoints that hurt mask agreement, then restore the count.

    Adjacent-keypoint segments are scanned longest first (misplaced
    keypoints stretch their segments); each removal is kept when the
    spline-mask IoU does not drop and the length error does not grow, and
    a kept removal restarts the scan. The surviving chain is resampled
    back to the original keypoint count. Chains with fewer than three
    keypoints are returned unchanged with ``skipped`` set.
    """
    fiber = detection.fiber
    points = fiber.keypoints.points
    n_original = len(points)
    if n_original < 3:
        return PruneResult(keypoints=fiber.keypoints, skipped=True)

    h, w = detection.mask.shape
    width = fiber.width
    predicted_length = fiber.length

    def evaluate(pts: np.ndarray) -> tuple[float, float]:
        spline_mask = _rasterize_points(pts, width, w, h)
        return mask_iou(spline_mask, detection.mask), _length_error(pts, predicted_length)

    points = points.copy()
    iou, length_error = evaluate(points)
    result = PruneResult(keypoints=fiber.keypoints, skipped=False,
                         baseline_iou=iou, baseline_length_error=length_error)

    improved = True
    while improved and len(points) > 2:
        improved = False
        seg_lengths = np.hypot(*(points[1:] - points[:-1]).T)
        # stable sort keeps original segment order among equal lengths
        order = np.argsort(-seg_lengths, kind="stable")
        for seg_index in order:
            for kp_index in (int(seg_index), int(seg_index) + 1):
                candidate = np.delete(points, kp_index, axis=0)
                if not _chain_valid(candidate):
                    continue
                cand_iou, cand_err = evaluate(candidate)
                if cand_iou >= iou and cand_err <= length_error:
                    points = candidate
                    iou, length_error = cand_iou, cand_err
                    result.steps.append(PruneStep(kp_index, iou, length_error))
                    improved = True
                    break
            if improved:
                break  # restart the segment scan on the improved chain

    result.keypoints = resample_keypoints(KeypointChain(points), n_original)
    return result
