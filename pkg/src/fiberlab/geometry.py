"""Core fiber geometry.

A fiber is an ordered chain of 2D keypoints (its spine) together with a
constant width and a total arc length. This module provides the chain and
fiber types, uniform natural cubic splines through keypoints, arc-length
integration and resampling, the canonical spatial ordering of keypoints,
mask rasterization, and the spline-fit score used to choose how many
keypoints a chain needs (sum of squared residuals plus an information
criterion that penalizes extra keypoints).

Coordinates use the image convention: x grows to the right, y grows
downward, and the pixel at ``mask[y, x]`` has its center at ``(x, y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._bic_kernel import bic_sweep
from ._spline import ArcLengthMap, UniformCubicSpline, adaptive_arc_length

#: Default number of keypoints fibers are normalized to.
DEFAULT_KEYPOINT_COUNT = 40
#: Default knot-count search range (inclusive) for keypoint-count selection.
DEFAULT_K_RANGE = (4, 100)
#: Default percentile of the per-fiber optimum distribution.
DEFAULT_PERCENTILE = 90.0
#: Residual floor that keeps the information criterion finite for perfect fits.
SSR_EPSILON = 1e-12
#: Maximum spacing (px) between consecutive curve samples when rasterizing.
RASTER_SAMPLE_SPACING = 0.25


@dataclass(frozen=True, eq=False)
class KeypointChain:
    """Ordered chain of at least two 2D keypoints, immutable after creation.

    ``points`` is an (K, 2) float64 array with columns x, y. Consecutive
    points must differ; the array is stored read-only.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("keypoints must form an (K, 2) array")
        if pts.shape[0] < 2:
            raise ValueError("a keypoint chain needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("keypoint coordinates must be finite")
        if np.any(np.all(pts[1:] == pts[:-1], axis=1)):
            raise ValueError("consecutive keypoints must not coincide")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def reverse(self) -> "KeypointChain":
        return KeypointChain(self.points[::-1])


@dataclass(frozen=True, eq=False)
class Fiber:
    """Fiber instance: keypoint spine plus constant width and arc length."""

    keypoints: KeypointChain
    width: float
    length: float

    def __post_init__(self):
        if not (math.isfinite(self.width) and self.width > 0):
            raise ValueError("fiber width must be positive")
        if not (math.isfinite(self.length) and self.length > 0):
            raise ValueError("fiber length must be positive")
        chord = float(np.hypot(*(self.keypoints.points[-1] - self.keypoints.points[0])))
        if self.length + 1e-6 < chord:
            raise ValueError("fiber length cannot be shorter than the endpoint distance")


@dataclass(frozen=True)
class SSRConfig:
    """Sampling configuration for spline residuals: number of point pairs."""

    sample_count: int = 200

    def __post_init__(self):
        if self.sample_count < 2:
            raise ValueError("sample_count must be at least 2")


def _spline(chain: KeypointChain) -> UniformCubicSpline:
    return UniformCubicSpline(chain.points)


def spline_interpolate(chain: KeypointChain, t) -> np.ndarray:
    """Point on the uniform cubic spline through ``chain`` at parameter t.

    Knots sit at i/(K-1); the curve passes through every keypoint and is
    C2-continuous with natural (zero second derivative) ends. Scalar t
    returns shape (2,), an array of t returns (n, 2).
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < -1e-12) or np.any(t_arr > 1 + 1e-12):
        raise ValueError("spline parameter must lie in [0, 1]")
    return _spline(chain).point(np.clip(t_arr, 0.0, 1.0))


def spline_length(chain: KeypointChain) -> float:
    """Arc length of the spline, integrated adaptively to 1e-9 relative."""
    return adaptive_arc_length(_spline(chain))


def resample_keypoints(chain: KeypointChain, k: int) -> KeypointChain:
    """Resample to k points at equal arc-length spacing along the spline.

    The first and last output points equal the original endpoints exactly.
    """
    if k < 2:
        raise ValueError("resampling needs k >= 2")
    amap = ArcLengthMap(_spline(chain))
    pts = amap.points_at_fractions(np.linspace(0.0, 1.0, k))
    pts[0] = chain.points[0]
    pts[-1] = chain.points[-1]
    return KeypointChain(pts)


def order_keypoints(chain: KeypointChain) -> KeypointChain:
    """Canonical spatial ordering: start at the topmost endpoint.

    With y growing downward, the chain is reversed unless the first point
    is above the last, or level with it and not to its right. Ties in both
    coordinates keep the chain as is. Idempotent.
    """
    x0, y0 = chain.points[0]
    x1, y1 = chain.points[-1]
    if (y0, x0) <= (y1, x1):
        return chain
    return chain.reverse()


def _rasterize_points(points: np.ndarray, width: float, canvas_width: int,
                      canvas_height: int) -> np.ndarray:
    """Rasterize a capsule swept along the spline through ``points``.

    The spline is sampled at arc spacing <= RASTER_SAMPLE_SPACING and a
    pixel is set when its center lies within width/2 of the sampled
    polyline. A KD-tree over the samples decides almost every pixel; the
    thin band where sample distance and polyline distance may disagree is
    refined with exact point-to-segment distances.
    """
    if width <= 0:
        raise ValueError("fiber width must be positive")
    if canvas_width <= 0 or canvas_height <= 0:
        raise ValueError("canvas dimensions must be positive")
    mask = np.zeros((canvas_height, canvas_width), dtype=bool)
    amap = ArcLengthMap(UniformCubicSpline(points))
    n = max(2, int(math.ceil(amap.total / RASTER_SAMPLE_SPACING)) + 1)
    samples = amap.points_at_fractions(np.linspace(0.0, 1.0, n))
    spacing = amap.total / (n - 1)
    radius = width / 2.0

    xmin = max(int(math.floor(samples[:, 0].min() - radius)), 0)
    xmax = min(int(math.ceil(samples[:, 0].max() + radius)), canvas_width - 1)
    ymin = max(int(math.floor(samples[:, 1].min() - radius)), 0)
    ymax = min(int(math.ceil(samples[:, 1].max() + radius)), canvas_height - 1)
    if xmin > xmax or ymin > ymax:
        return mask

    ys, xs = np.mgrid[ymin:ymax + 1, xmin:xmax + 1]
    ys = ys.ravel()
    xs = xs.ravel()
    centers = np.column_stack([xs, ys]).astype(np.float64)
    bound = math.sqrt(radius * radius + 0.25 * spacing * spacing) + 1e-9
    dist, nearest = cKDTree(samples).query(centers, k=1, distance_upper_bound=bound)

    inside = dist <= radius
    band = np.isfinite(dist) & ~inside
    if band.any():
        p = centers[band]
        j = np.minimum(nearest[band], n - 1)
        best = np.full(p.shape[0], np.inf)
        for off in range(-3, 3):
            seg = np.clip(j + off, 0, n - 2)
            a = samples[seg]
            ab = samples[seg + 1] - a
            denom = np.einsum("ij,ij->i", ab, ab)
            t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.maximum(denom, 1e-300), 0.0, 1.0)
            proj = a + t[:, None] * ab
            best = np.minimum(best, np.hypot(p[:, 0] - proj[:, 0], p[:, 1] - proj[:, 1]))
        inside[np.flatnonzero(band)] = best <= radius

    mask[ys[inside], xs[inside]] = True
    return mask


def rasterize_fiber(fiber: Fiber, canvas_width: int, canvas_height: int) -> np.ndarray:
    """Binary mask of the fiber on the given canvas, clipped to its bounds."""
    return _rasterize_points(fiber.keypoints.points, fiber.width, canvas_width, canvas_height)


def _arc_samples(chain: KeypointChain, count: int) -> np.ndarray:
    amap = ArcLengthMap(_spline(chain))
    return amap.points_at_fractions(np.linspace(0.0, 1.0, count))


def ssr(approx: KeypointChain, truth: KeypointChain, cfg: SSRConfig | None = None) -> float:
    """Sum of squared residuals between arc-length-paired spline samples.

    Both splines are sampled at N equal fractions of their own arc length
    and the squared x and y differences of corresponding samples are
    summed.
    """
    cfg = cfg or SSRConfig()
    pa = _arc_samples(approx, cfg.sample_count)
    pt = _arc_samples(truth, cfg.sample_count)
    return float(np.sum((pa - pt) ** 2))


def bic(approx: KeypointChain, truth: KeypointChain, k: int,
        cfg: SSRConfig | None = None) -> float:
    """Information criterion N*ln(SSR/N) + k*ln(N) for a k-point fit.

    SSR below SSR_EPSILON is clamped so perfect fits stay finite.
    """
    cfg = cfg or SSRConfig()
    n = cfg.sample_count
    value = max(ssr(approx, truth, cfg), SSR_EPSILON)
    return n * math.log(value / n) + k * math.log(n)


def optimal_keypoint_count(chains, k_range: tuple[int, int] = DEFAULT_K_RANGE,
                           percentile: float = DEFAULT_PERCENTILE,
                           cfg: SSRConfig | None = None) -> int:
    """Percentile of per-chain optimum keypoint counts.

    For every chain, each candidate count k in the inclusive range is
    scored by resampling the chain to k points and evaluating the
    information criterion of that fit against the chain itself; the
    argmin k is the chain's optimum. Returns the ceiling-rank percentile
    of the optima across all chains.
    """
    chains = list(chains)
    if not chains:
        raise ValueError("need at least one chain")
    k_min, k_max = int(k_range[0]), int(k_range[1])
    if k_min < 2 or k_max < k_min:
        raise ValueError("invalid keypoint-count range")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    cfg = cfg or SSRConfig()
    n = cfg.sample_count

    ks = np.arange(k_min, k_max + 1, dtype=np.int64)
    fractions = [np.linspace(0.0, 1.0, int(k)) for k in ks]
    all_fractions = np.concatenate(fractions)
    offsets = np.concatenate(([0], np.cumsum(ks)))[:-1].astype(np.int64)
    sample_fractions = np.linspace(0.0, 1.0, n)

    optima = []
    for chain in chains:
        amap = ArcLengthMap(_spline(chain))
        truth_samples = amap.points_at_fractions(sample_fractions)
        resampled = amap.points_at_fractions(all_fractions)
        bics = bic_sweep(truth_samples, resampled, ks, offsets, n, SSR_EPSILON, 8)
        optima.append(int(ks[int(np.argmin(bics))]))

    optima.sort()
    rank = max(1, math.ceil(percentile / 100.0 * len(optima)))
    return optima[min(rank, len(optima)) - 1]
