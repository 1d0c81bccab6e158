"""Semiautomatic fiber annotation.

Pipeline for images that contain one dominant fiber without loops,
clutter or overlaps: denoise and threshold, skeletonize the instance
mask, trace the longest connected path through the skeleton, resample it
to a fixed keypoint count, then read the width off the Euclidean distance
map and the length off the spline. A quality report accompanies every
fiber so questionable annotations can be filtered downstream.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import skeletonize as _thin

from .geometry import (
    DEFAULT_KEYPOINT_COUNT,
    Fiber,
    KeypointChain,
    order_keypoints,
    resample_keypoints,
    spline_length,
)


class NoFiberError(RuntimeError):
    """Raised when an image yields no usable fiber."""


_EIGHT = np.ones((3, 3), dtype=int)
# neighbor offsets in fixed clockwise order starting north; determinism of
# path tracing depends on this order
_OFFSETS = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


@dataclass(frozen=True)
class AnnotationConfig:
    denoise_radius: int = 1
    polarity: str = "bright"
    keypoint_count: int = DEFAULT_KEYPOINT_COUNT

    def __post_init__(self):
        if self.denoise_radius < 0:
            raise ValueError("denoise_radius must be >= 0")
        if self.polarity not in ("bright", "dark"):
            raise ValueError("polarity must be 'bright' or 'dark'")
        if self.keypoint_count < 2:
            raise ValueError("keypoint_count must be >= 2")


@dataclass
class AnnotationReport:
    """Diagnostics for manual filtering of questionable annotations."""

    component_count: int
    branch_count: int
    endpoint_count: int
    loop: bool
    flags: list[str] = field(default_factory=list)


def _as_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("expected a 2D grayscale image")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255):
            raise ValueError("intensities must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def segment(image: np.ndarray, denoise_radius: int = 1, polarity: str = "bright") -> np.ndarray:
    """Median-denoise then threshold an image into a foreground mask.

    The global threshold maximizes between-class variance on the denoised
    image. ``polarity`` picks whether bright or dark pixels count as
    foreground; the dark case runs the bright case on the inverted image
    so the two are exact mirrors. A constant image produces an empty mask
    and a warning rather than an error.
    """
    img = _as_gray(image)
    if polarity == "dark":
        return segment(255 - img, denoise_radius, "bright")
    if polarity != "bright":
        raise ValueError("polarity must be 'bright' or 'dark'")
    if denoise_radius > 0:
        img = ndimage.median_filter(img, size=2 * denoise_radius + 1)
    if img.min() == img.max():
        warnings.warn("constant image: segmentation is empty", stacklevel=2)
        return np.zeros(img.shape, dtype=bool)
    return img > threshold_otsu(img)


def _remove_2x2_blocks(skel: np.ndarray) -> np.ndarray:
    """Delete redundant pixels of fully set 2x2 blocks.

    Candidates are removed in row-major order, each only if deletion keeps
    the number of 8-connected components unchanged. Blocks whose every
    pixel is a cut vertex are left alone.
    """
    n_comp = ndimage.label(skel, _EIGHT)[1]
    while True:
        blocks = skel[:-1, :-1] & skel[1:, :-1] & skel[:-1, 1:] & skel[1:, 1:]
        if not blocks.any():
            return skel
        removed = False
        for y0, x0 in zip(*np.nonzero(blocks)):
            for y, x in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
                if not skel[y, x]:
                    continue
                skel[y, x] = False
                if ndimage.label(skel, _EIGHT)[1] == n_comp:
                    removed = True
                    break
                skel[y, x] = True
            if removed:
                break
        if not removed:
            return skel


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Thin a mask to unit width while preserving 8-connectivity.

    Iterative two-subpass thinning followed by a cleanup that resolves any
    remaining fully set 2x2 block without splitting components. The result
    is always a subset of the input.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("expected a 2D mask")
    if not mask.any():
        return np.zeros_like(mask)
    return _remove_2x2_blocks(_thin(mask, method="zhang").astype(bool))


def _largest_component(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, count = ndimage.label(mask, _EIGHT)
    if count == 0:
        raise NoFiberError("mask contains no foreground")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1), count


def _adjacency(pixels: set[tuple[int, int]]) -> dict:
    return {
        p: [q for dy, dx in _OFFSETS if (q := (p[0] + dy, p[1] + dx)) in pixels]
        for p in pixels
    }


def _bfs(start, graph):
    dist = {start: 0}
    parent: dict = {}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nb in graph[cur]:
            if nb not in dist:
                dist[nb] = dist[cur] + 1
                parent[nb] = cur
                queue.append(nb)
    return dist, parent


def _walk_path(end, parent):
    path = [end]
    while path[-1] in parent:
        path.append(parent[path[-1]])
    return path[::-1]


def longest_path(skeleton: np.ndarray) -> np.ndarray:
    """Ordered (x, y) pixels of the longest path through the skeleton.

    Works on the largest 8-connected component. For skeletons with
    endpoints (degree-1 pixels) this is the longest of the BFS paths over
    all endpoint pairs; off-path pixels are dropped. Pure cycles are
    opened into a full walk; other endpoint-free structures fall back to a
    double BFS sweep.
    """
    skeleton = np.asarray(skeleton, dtype=bool)
    if not skeleton.any():
        raise NoFiberError("empty skeleton")
    component, _ = _largest_component(skeleton)
    pixels = {(int(y), int(x)) for y, x in zip(*np.nonzero(component))}
    graph = _adjacency(pixels)
    endpoints = sorted(p for p, nb in graph.items() if len(nb) == 1)

    if len(pixels) == 1:
        (p,) = pixels
        return np.array([[p[1], p[0]]], dtype=np.int64)

    if endpoints:
        best_len = -1
        best = None
        for start in endpoints:
            dist, parent = _bfs(start, graph)
            reachable = [e for e in endpoints if e != start and e in dist]
            if not reachable:
                continue
            end = max(reachable, key=lambda e: (dist[e], (-e[0], -e[1])))
            if dist[end] + 1 > best_len:
                best_len = dist[end] + 1
                best = _walk_path(end, parent)
        if best is None:  # single endpoint attached to a cycle
            start = endpoints[0]
            dist, parent = _bfs(start, graph)
            end = max(dist, key=lambda p: (dist[p], (-p[0], -p[1])))
            best = _walk_path(end, parent)
    elif all(len(nb) == 2 for nb in graph.values()):
        # pure cycle: open it into a full walk
        start = min(pixels)
        best = [start]
        prev = None
        cur = start
        while True:
            nxt = next(nb for nb in graph[cur] if nb != prev and (nb != start or len(best) > 2))
            if nxt == start:
                break
            best.append(nxt)
            prev, cur = cur, nxt
    else:
        # tangled endpoint-free structure: double BFS sweep approximation
        start = min(pixels)
        dist, _ = _bfs(start, graph)
        u = max(dist, key=lambda p: (dist[p], (-p[0], -p[1])))
        dist_u, parent_u = _bfs(u, graph)
        v = max(dist_u, key=lambda p: (dist_u[p], (-p[0], -p[1])))
        best = _walk_path(v, parent_u)

    return np.array([[x, y] for (y, x) in best], dtype=np.int64)


def distance_map(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance to the nearest background pixel.

    The image border counts as adjacent to background, so values stay
    finite for all-true masks.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def estimate_width(dmap: np.ndarray, keypoints) -> float:
    """Twice the mean bilinear distance-map value at the keypoints.

    ``keypoints`` may be a KeypointChain or a plain (K, 2) array.
    """
    dmap = np.asarray(dmap, dtype=np.float64)
    h, w = dmap.shape
    pts = keypoints.points if isinstance(keypoints, KeypointChain) \
        else np.asarray(keypoints, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x < 0) or np.any(x > w - 1) or np.any(y < 0) or np.any(y > h - 1):
        raise ValueError("keypoint outside distance-map bounds")
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    vals = (dmap[y0, x0] * (1 - fx) * (1 - fy) + dmap[y0, x1] * fx * (1 - fy)
            + dmap[y1, x0] * (1 - fx) * fy + dmap[y1, x1] * fx * fy)
    return float(vals.mean() * 2.0)


def _skeleton_degrees(skel: np.ndarray) -> np.ndarray:
    padded = np.pad(skel, 1).astype(np.int32)
    deg = np.zeros(skel.shape, dtype=np.int32)
    for dy, dx in _OFFSETS:
        deg += padded[1 + dy:padded.shape[0] - 1 + dy, 1 + dx:padded.shape[1] - 1 + dx]
    return np.where(skel, deg, 0)


def annotate_fiber(image: np.ndarray,
                   config: AnnotationConfig | None = None) -> tuple[Fiber, AnnotationReport]:
    """Extract one fiber annotation from a single-fiber image.

    Returns the fiber plus a report with the foreground component count,
    skeleton branch statistics and warning flags. Raises NoFiberError when
    the image has no usable foreground.
    """
    config = config or AnnotationConfig()
    mask = segment(image, config.denoise_radius, config.polarity)
    if not mask.any():
        raise NoFiberError("segmentation produced no foreground")
    instance, component_count = _largest_component(mask)
    skel = skeletonize(instance)
    path = longest_path(skel)
    if path.shape[0] < 2:
        raise NoFiberError("instance too small to trace")

    chain = order_keypoints(resample_keypoints(
        KeypointChain(path.astype(np.float64)), config.keypoint_count))
    # the spline may overshoot the canvas by a fraction of a pixel when the
    # traced path hugs the border; clamp only for the width lookup
    h, w = instance.shape
    lookup = np.column_stack([np.clip(chain.points[:, 0], 0, w - 1),
                              np.clip(chain.points[:, 1], 0, h - 1)])
    width = estimate_width(distance_map(instance), lookup)
    if width <= 0:
        raise NoFiberError("estimated width is not positive")
    fiber = Fiber(chain, width=width, length=spline_length(chain))

    degrees = _skeleton_degrees(skel)
    branch_count = int(np.count_nonzero(degrees >= 3))
    endpoint_count = int(np.count_nonzero(degrees == 1))
    loop = endpoint_count == 0
    flags = []
    if component_count > 1:
        flags.append("multiple-components")
    if branch_count > 0:
        flags.append("branched-skeleton")
    if loop:
        flags.append("loop")
    report = AnnotationReport(component_count=component_count,
                              branch_count=branch_count,
                              endpoint_count=endpoint_count,
                              loop=loop, flags=flags)
    return fiber, report
