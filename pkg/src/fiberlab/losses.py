"""Multi-task loss arithmetic for width/length regression heads.

The network-side losses (classification, box, mask, keypoint) enter as
opaque non-negative scalars; this module owns the mean-squared-error
based width and length terms, their weights, and the total. Gradients are
provided so external training code can validate its implementation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Width-loss weight keeping the term comparable to the other heads.
DEFAULT_WIDTH_WEIGHT = 1e-3
#: Length-loss weight keeping the term comparable to the other heads.
DEFAULT_LENGTH_WEIGHT = 1e-6


@dataclass(frozen=True)
class LossWeights:
    width_weight: float = DEFAULT_WIDTH_WEIGHT
    length_weight: float = DEFAULT_LENGTH_WEIGHT

    def __post_init__(self):
        if self.width_weight <= 0 or self.length_weight <= 0:
            raise ValueError("loss weights must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-head loss values; the first four come from the network heads."""

    classification: float
    box: float
    mask: float
    keypoint: float
    width: float
    length: float

    def __post_init__(self):
        for name in ("classification", "box", "mask", "keypoint", "width", "length"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} loss must be non-negative")


def _vectors(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ValueError("need at least one element")
    if pred.shape != target.shape:
        raise ValueError("prediction and target lengths differ")
    return pred, target


def mse(pred, target) -> float:
    """Mean squared error over paired vectors."""
    p, t = _vectors(pred, target)
    return float(np.mean((p - t) ** 2))


def mse_gradient(pred, target) -> np.ndarray:
    """d(mse)/d(pred) = 2 (pred - target) / n."""
    p, t = _vectors(pred, target)
    return 2.0 * (p - t) / p.size


def width_loss(pred, target, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return weights.width_weight * mse(pred, target)


def width_loss_gradient(pred, target, weights: LossWeights | None = None) -> np.ndarray:
    weights = weights or LossWeights()
    return weights.width_weight * mse_gradient(pred, target)


def length_loss(pred, target, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return weights.length_weight * mse(pred, target)


def length_loss_gradient(pred, target, weights: LossWeights | None = None) -> np.ndarray:
    weights = weights or LossWeights()
    return weights.length_weight * mse_gradient(pred, target)


def total_loss(breakdown: LossBreakdown) -> float:
    """Sum of all six per-head losses."""
    return (breakdown.classification + breakdown.box + breakdown.mask
            + breakdown.keypoint + breakdown.width + breakdown.length)
