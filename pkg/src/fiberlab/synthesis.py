"""Synthetic fiber scenes with exact ground truth.

Scenes are built from smoothed random-walk fibers rasterized onto a flat
background with optional attached clutter discs, Gaussian pixel noise and
difficulty controls (loops / clutter / overlaps). Realism is a non-goal;
the value of the generator is that its annotations are exact by
construction, which makes it usable as an oracle for round-trip and
evaluation tests.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset_io
from ._spline import ArcLengthMap, UniformCubicSpline
from .geometry import (
    DEFAULT_KEYPOINT_COUNT,
    Fiber,
    KeypointChain,
    order_keypoints,
    rasterize_fiber,
    resample_keypoints,
    spline_length,
)

_MAX_FIBER_ATTEMPTS = 200
_MAX_PLACEMENT_ATTEMPTS = 80


@dataclass(frozen=True)
class SynthConfig:
    canvas_width: int = 384
    canvas_height: int = 288
    fiber_count_range: tuple[int, int] = (1, 3)
    width_range: tuple[float, float] = (8.0, 12.0)
    length_range: tuple[float, float] = (220.0, 420.0)
    curvature: float = 0.12
    allow_loops: bool = False
    allow_clutter: bool = False
    allow_overlaps: bool = False
    background_mean: float = 40.0
    foreground_mean: float = 200.0
    noise_sigma: float = 5.0
    keypoint_count: int = DEFAULT_KEYPOINT_COUNT
    seed: int = 0

    def __post_init__(self):
        if self.canvas_width <= 0 or self.canvas_height <= 0:
            raise ValueError("canvas dimensions must be positive")
        lo, hi = self.fiber_count_range
        if lo < 1 or hi < lo:
            raise ValueError("fiber_count_range must be ordered and >= 1")
        for name in ("width_range", "length_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be positive and ordered")
        if self.curvature < 0:
            raise ValueError("curvature must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.keypoint_count < 2:
            raise ValueError("keypoint_count must be >= 2")
        diagonal = math.hypot(self.canvas_width, self.canvas_height)
        if self.length_range[1] > 3.0 * diagonal:
            raise ValueError("length_range exceeds 3x the canvas diagonal")


@dataclass
class SynthScene:
    """Rendered image plus exact annotations and realized difficulty flags."""

    image: np.ndarray
    fibers: list[Fiber]
    loops: bool
    clutter: bool
    overlaps: bool
    fiber_mask: np.ndarray = field(repr=False, default=None)
    clutter_mask: np.ndarray = field(repr=False, default=None)

    def realized_flags(self) -> dataset_io.SubsetFlags:
        return dataset_io.SubsetFlags.from_realized(self.loops, self.clutter, self.overlaps)


def _dense_polyline(chain: KeypointChain, count: int = 160) -> np.ndarray:
    amap = ArcLengthMap(UniformCubicSpline(chain.points))
    return amap.points_at_fractions(np.linspace(0.0, 1.0, count))


def polyline_self_intersects(points: np.ndarray) -> bool:
    """Proper-crossing test over all non-adjacent segment pairs."""
    p = np.asarray(points, dtype=np.float64)
    a, b = p[:-1], p[1:]
    n = len(a)
    if n < 3:
        return False
    i, j = np.triu_indices(n, k=2)
    a1, b1, a2, b2 = a[i], b[i], a[j], b[j]

    def cross(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    d1 = cross(b1 - a1, a2 - a1)
    d2 = cross(b1 - a1, b2 - a1)
    d3 = cross(b2 - a2, a1 - a2)
    d4 = cross(b2 - a2, b1 - a2)
    return bool(np.any(((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))))


def fiber_self_intersects(fiber: Fiber) -> bool:
    return polyline_self_intersects(_dense_polyline(fiber.keypoints))


def _random_walk(cfg: SynthConfig, rng: np.random.Generator, target: float) -> np.ndarray:
    n_steps = max(8, int(round(target / 15.0)))
    heading0 = rng.uniform(0.0, 2.0 * math.pi)
    if cfg.curvature == 0.0:
        increments = np.zeros(n_steps - 1)
    else:
        increments = rng.normal(0.0, cfg.curvature, n_steps - 1)
        increments = np.convolve(increments, [0.25, 0.5, 0.25], mode="same")
    if cfg.allow_loops and rng.random() < 0.5:
        # persistent turning through more than one full revolution makes
        # self-overlap likely
        turn = rng.choice((-1.0, 1.0)) * rng.uniform(1.2, 2.0) * 2.0 * math.pi
        increments = increments + turn / max(n_steps - 1, 1)
    headings = heading0 + np.concatenate(([0.0], np.cumsum(increments)))
    steps = (target / n_steps) * np.column_stack([np.cos(headings), np.sin(headings)])
    return np.concatenate([[[0.0, 0.0]], np.cumsum(steps, axis=0)])


def sample_fiber(cfg: SynthConfig, rng) -> Fiber:
    """Draw one fiber whose spline length matches the sampled target.

    The control polygon is a smoothed random heading walk, resampled to
    the configured keypoint count and rescaled so the final spline length
    equals the target exactly (rescaling is exact because arc length is
    linear under uniform scaling). Fibers are placed uniformly among
    offsets that keep the swept capsule inside the canvas; when loops are
    disallowed, self-intersecting candidates are rejected and redrawn.
    """
    rng = np.random.default_rng(rng)
    width = rng.uniform(*cfg.width_range)
    target = rng.uniform(*cfg.length_range)
    diagonal = math.hypot(cfg.canvas_width, cfg.canvas_height)
    if target > 3.0 * diagonal:
        raise ValueError("sampled length exceeds 3x the canvas diagonal")
    margin = width / 2.0 + 2.0

    for _ in range(_MAX_FIBER_ATTEMPTS):
        polygon = _random_walk(cfg, rng, target)
        chain = resample_keypoints(KeypointChain(polygon), cfg.keypoint_count)
        length = spline_length(chain)
        if length <= 0:
            continue
        pts = chain.points * (target / length)

        dense = _dense_polyline(KeypointChain(pts))
        lo = dense.min(axis=0)
        hi = dense.max(axis=0)
        x_lo, x_hi = margin - lo[0], cfg.canvas_width - 1 - margin - hi[0]
        y_lo, y_hi = margin - lo[1], cfg.canvas_height - 1 - margin - hi[1]
        if x_lo > x_hi or y_lo > y_hi:
            continue  # walk does not fit; redraw
        offset = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])

        placed = order_keypoints(KeypointChain(pts + offset))
        if not cfg.allow_loops and polyline_self_intersects(_dense_polyline(placed)):
            continue
        return Fiber(placed, width=width, length=spline_length(placed))
    raise RuntimeError("failed to sample a feasible fiber; loosen the configuration")


def _paint_disc(mask: np.ndarray, center: np.ndarray, radius: float) -> None:
    h, w = mask.shape
    x0 = max(int(math.floor(center[0] - radius)), 0)
    x1 = min(int(math.ceil(center[0] + radius)), w - 1)
    y0 = max(int(math.floor(center[1] - radius)), 0)
    y1 = min(int(math.ceil(center[1] + radius)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    inside = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius ** 2
    mask[ys[inside], xs[inside]] = True


def _sample_clutter(fibers, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((cfg.canvas_height, cfg.canvas_width), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        fiber = fibers[int(rng.integers(len(fibers)))]
        amap = ArcLengthMap(UniformCubicSpline(fiber.keypoints.points))
        anchor = amap.points_at_fractions(np.array([rng.uniform(0.15, 0.85)]))[0]
        for _ in range(int(rng.integers(2, 6))):
            center = anchor + rng.normal(0.0, fiber.width * 0.8, 2)
            radius = fiber.width * rng.uniform(0.3, 0.7) + 1.0
            _paint_disc(mask, center, radius)
    return mask


def render_scene(fibers, cfg: SynthConfig, rng, masks=None) -> SynthScene:
    """Composite fibers (plus optional clutter) over noise onto a canvas."""
    fibers = list(fibers)
    if not fibers:
        raise ValueError("render_scene needs at least one fiber")
    rng = np.random.default_rng(rng)
    if masks is None:
        masks = [rasterize_fiber(f, cfg.canvas_width, cfg.canvas_height) for f in fibers]
    fiber_mask = np.zeros((cfg.canvas_height, cfg.canvas_width), dtype=bool)
    for m in masks:
        fiber_mask |= m

    clutter_mask = (_sample_clutter(fibers, cfg, rng) if cfg.allow_clutter
                    else np.zeros_like(fiber_mask))
    foreground = fiber_mask | clutter_mask

    image = np.where(foreground, cfg.foreground_mean, cfg.background_mean)
    image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    overlaps = any((masks[i] & masks[j]).any()
                   for i in range(len(masks)) for j in range(i + 1, len(masks)))
    loops = any(fiber_self_intersects(f) for f in fibers)
    return SynthScene(image=image, fibers=fibers, loops=loops,
                      clutter=bool(clutter_mask.any()), overlaps=overlaps,
                      fiber_mask=fiber_mask, clutter_mask=clutter_mask)


def sample_scene(cfg: SynthConfig, rng) -> SynthScene:
    """Sample fibers (respecting the overlap constraint) and render them."""
    rng = np.random.default_rng(rng)
    count = int(rng.integers(cfg.fiber_count_range[0], cfg.fiber_count_range[1] + 1))
    fibers: list[Fiber] = []
    masks: list[np.ndarray] = []
    union = np.zeros((cfg.canvas_height, cfg.canvas_width), dtype=bool)
    for _ in range(count):
        for _ in range(_MAX_PLACEMENT_ATTEMPTS):
            fiber = sample_fiber(cfg, rng)
            mask = rasterize_fiber(fiber, cfg.canvas_width, cfg.canvas_height)
            if cfg.allow_overlaps or not (mask & union).any():
                fibers.append(fiber)
                masks.append(mask)
                union |= mask
                break
        else:
            if fibers:
                break  # canvas is crowded; settle for fewer fibers
            raise RuntimeError("could not place any fiber without overlap")
    return render_scene(fibers, cfg, rng, masks=masks)


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    # per-scene stream derived from (master seed, scene index): results are
    # independent of worker scheduling
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def generate_dataset(cfg: SynthConfig, scene_count: int, out_dir,
                     workers: int = 1) -> dataset_io.DatasetManifest:
    """Write images plus an annotation manifest for ``scene_count`` scenes."""
    if scene_count < 1:
        raise ValueError("scene_count must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def build(index: int) -> SynthScene:
        return sample_scene(cfg, _scene_rng(cfg.seed, index))

    if workers == 1:
        scenes = [build(i) for i in range(scene_count)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(build, range(scene_count)))

    records = []
    for i, scene in enumerate(scenes):
        file_name = f"scene_{i:04d}.png"
        dataset_io.save_gray_png(scene.image, out_dir / file_name)
        records.append(dataset_io.ImageRecord(
            file_name=file_name,
            width_px=cfg.canvas_width,
            height_px=cfg.canvas_height,
            flags=scene.realized_flags(),
            split="unsplit",
            fibers=[dataset_io.FiberRecord.from_fiber(f) for f in scene.fibers],
        ))
    manifest = dataset_io.DatasetManifest(provenance="synthetic", images=records)
    dataset_io.save_annotations(manifest, out_dir / "annotations.json")
    return manifest
