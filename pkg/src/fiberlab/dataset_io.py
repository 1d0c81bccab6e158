"""Dataset interchange: annotation files, manifests, splits, augmentation.

Annotations travel as versioned JSON. A manifest carries a provenance tag
and one record per image: file name, canvas size, difficulty flags
(loops / clutter / overlaps), train-test split membership, and the fiber
annotations. Prediction files reuse the same schema with per-fiber
confidence scores, optional mask image paths, and optionally the pruned
keypoints next to the originals.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .geometry import Fiber, KeypointChain, order_keypoints

SCHEMA_VERSION = 1
FLAG_STATES = ("yes", "no", "random")
PROVENANCES = ("manual", "semiautomatic", "synthetic")
SPLITS = ("train", "test", "unsplit")
DEFAULT_TRAIN_FRACTION = 0.85


class SchemaVersionError(ValueError):
    """Annotation file declares a schema version this code cannot read."""


@dataclass(frozen=True)
class SubsetFlags:
    """Dataset difficulty flags; each is 'yes', 'no' or 'random'."""

    loops: str = "no"
    clutter: str = "no"
    overlaps: str = "no"

    def __post_init__(self):
        for name in ("loops", "clutter", "overlaps"):
            if getattr(self, name) not in FLAG_STATES:
                raise ValueError(f"{name} must be one of {FLAG_STATES}")

    @classmethod
    def from_realized(cls, loops: bool, clutter: bool, overlaps: bool) -> "SubsetFlags":
        to_state = lambda b: "yes" if b else "no"  # noqa: E731
        return cls(to_state(loops), to_state(clutter), to_state(overlaps))

    def key(self) -> str:
        return f"loops={self.loops},clutter={self.clutter},overlaps={self.overlaps}"


@dataclass(eq=False)
class FiberRecord:
    """One annotated or predicted fiber inside an image record."""

    keypoints: np.ndarray
    width_px: float
    length_px: float
    score: float | None = None
    mask_path: str | None = None
    keypoints_pruned: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 2 or len(self.keypoints) < 2:
            raise ValueError("keypoints must form an (K, 2) array with K >= 2")
        if not (math.isfinite(self.width_px) and self.width_px > 0):
            raise ValueError("width_px must be positive")
        if not (math.isfinite(self.length_px) and self.length_px > 0):
            raise ValueError("length_px must be positive")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        if self.keypoints_pruned is not None:
            self.keypoints_pruned = np.asarray(self.keypoints_pruned, dtype=np.float64)

    @classmethod
    def from_fiber(cls, fiber: Fiber, score: float | None = None,
                   mask_path: str | None = None) -> "FiberRecord":
        return cls(keypoints=fiber.keypoints.points.copy(), width_px=fiber.width,
                   length_px=fiber.length, score=score, mask_path=mask_path)

    def to_fiber(self) -> Fiber:
        return Fiber(KeypointChain(self.keypoints), width=self.width_px,
                     length=self.length_px)


@dataclass(eq=False)
class ImageRecord:
    file_name: str
    width_px: int
    height_px: int
    flags: SubsetFlags = field(default_factory=SubsetFlags)
    split: str = "unsplit"
    fibers: list[FiberRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")


@dataclass(eq=False)
class DatasetManifest:
    provenance: str
    images: list[ImageRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        names = [rec.file_name for rec in self.images]
        if len(set(names)) != len(names):
            raise ValueError("image file names must be unique")

    def subset_keys(self) -> list[str]:
        return sorted({rec.flags.key() for rec in self.images})


def _fiber_to_json(rec: FiberRecord) -> dict:
    out: dict = {
        "keypoints": [[float(x), float(y)] for x, y in rec.keypoints],
        "width_px": float(rec.width_px),
        "length_px": float(rec.length_px),
    }
    if rec.score is not None:
        out["score"] = float(rec.score)
    if rec.mask_path is not None:
        out["mask_path"] = rec.mask_path
    if rec.keypoints_pruned is not None:
        out["keypoints_pruned"] = [[float(x), float(y)] for x, y in rec.keypoints_pruned]
    return out


def save_annotations(manifest: DatasetManifest, path) -> None:
    """Write a manifest as versioned JSON (lossless round trip)."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "provenance": manifest.provenance,
        "images": [
            {
                "file_name": rec.file_name,
                "width_px": rec.width_px,
                "height_px": rec.height_px,
                "flags": {"loops": rec.flags.loops, "clutter": rec.flags.clutter,
                          "overlaps": rec.flags.overlaps},
                "split": rec.split,
                "fibers": [_fiber_to_json(f) for f in rec.fibers],
            }
            for rec in manifest.images
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _context_error(context: str, problem: str) -> ValueError:
    return ValueError(f"{context}: {problem}")


def _parse_fiber(raw: dict, context: str) -> FiberRecord:
    if not isinstance(raw, dict):
        raise _context_error(context, "fiber record must be an object")
    for key in ("keypoints", "width_px", "length_px"):
        if key not in raw:
            raise _context_error(context, f"missing field '{key}'")
    try:
        return FiberRecord(
            keypoints=np.asarray(raw["keypoints"], dtype=np.float64),
            width_px=float(raw["width_px"]),
            length_px=float(raw["length_px"]),
            score=float(raw["score"]) if "score" in raw else None,
            mask_path=raw.get("mask_path"),
            keypoints_pruned=(np.asarray(raw["keypoints_pruned"], dtype=np.float64)
                              if "keypoints_pruned" in raw else None),
        )
    except (TypeError, ValueError) as exc:
        raise _context_error(context, str(exc)) from exc


def load_annotations(path) -> DatasetManifest:
    """Read a manifest, naming the offending record on validation errors."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: parse error at line {exc.lineno}, column "
                             f"{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top level must be an object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: unsupported schema version {version!r} "
                                 f"(expected {SCHEMA_VERSION})")
    images = []
    for i, raw in enumerate(doc.get("images", [])):
        context = f"images[{i}]"
        if not isinstance(raw, dict):
            raise _context_error(context, "image record must be an object")
        for key in ("file_name", "width_px", "height_px"):
            if key not in raw:
                raise _context_error(context, f"missing field '{key}'")
        flags_raw = raw.get("flags", {})
        try:
            flags = SubsetFlags(loops=flags_raw.get("loops", "no"),
                                clutter=flags_raw.get("clutter", "no"),
                                overlaps=flags_raw.get("overlaps", "no"))
        except ValueError as exc:
            raise _context_error(f"{context}.flags", str(exc)) from exc
        fibers = [_parse_fiber(f, f"{context}.fibers[{j}]")
                  for j, f in enumerate(raw.get("fibers", []))]
        try:
            images.append(ImageRecord(file_name=raw["file_name"],
                                      width_px=int(raw["width_px"]),
                                      height_px=int(raw["height_px"]),
                                      flags=flags,
                                      split=raw.get("split", "unsplit"),
                                      fibers=fibers))
        except (TypeError, ValueError) as exc:
            raise _context_error(context, str(exc)) from exc
    try:
        return DatasetManifest(provenance=doc.get("provenance", "manual"), images=images)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def split_dataset(manifest: DatasetManifest,
                  train_fraction: float = DEFAULT_TRAIN_FRACTION,
                  rng=None) -> DatasetManifest:
    """Assign train/test splits per subset via a seeded shuffle.

    Within every flag subset the train set receives floor(fraction * n)
    images and the test set the remaining ceil((1 - fraction) * n).
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng)
    groups: dict[str, list[int]] = {}
    for idx, rec in enumerate(manifest.images):
        groups.setdefault(rec.flags.key(), []).append(idx)
    split_of = {}
    for key in sorted(groups):
        indices = groups[key]
        n = len(indices)
        # tiny epsilon absorbs representation error in fraction * n
        n_train = int(math.floor(train_fraction * n + 1e-9))
        order = rng.permutation(n)
        for rank, pos in enumerate(order):
            split_of[indices[pos]] = "train" if rank < n_train else "test"
    images = [replace(rec, split=split_of[idx], fibers=list(rec.fibers))
              for idx, rec in enumerate(manifest.images)]
    return DatasetManifest(provenance=manifest.provenance, images=images)


def aggregate_loop_subsets(manifests) -> DatasetManifest:
    """Merge loop-only manifests into one subset with randomized companions.

    Every input image must carry loops = 'yes'; the merged records get
    flags (loops=yes, clutter=random, overlaps=random).
    """
    manifests = list(manifests)
    if not manifests:
        raise ValueError("need at least one manifest")
    provenance = manifests[0].provenance
    merged_flags = SubsetFlags(loops="yes", clutter="random", overlaps="random")
    images = []
    for m, manifest in enumerate(manifests):
        if manifest.provenance != provenance:
            raise ValueError("cannot aggregate manifests of mixed provenance")
        for rec in manifest.images:
            if rec.flags.loops != "yes":
                raise ValueError(f"manifest {m}: image '{rec.file_name}' is not a loop image")
            images.append(replace(rec, flags=merged_flags, fibers=list(rec.fibers)))
    return DatasetManifest(provenance=provenance, images=images)


@dataclass(frozen=True)
class AugmentationParams:
    flip_lr_prob: float = 0.5
    flip_ud_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.5, 1.5)
    brightness_range: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        for name in ("flip_lr_prob", "flip_ud_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("contrast_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise ValueError(f"{name} must be positive and ordered")


def augment(image: np.ndarray, fibers, params: AugmentationParams | None = None,
            rng=None) -> tuple[np.ndarray, list[Fiber]]:
    """Randomly flip and re-expose an image together with its fibers.

    Flips map keypoint x to W-1-x and y to H-1-y and are applied before
    the keypoints are re-ordered, so augmented chains stay canonically
    ordered. Intensities then transform as c * (v - 128) + b * 128 with
    contrast c and brightness b drawn from the configured ranges. Widths
    and lengths are unchanged. The four random draws happen in a fixed
    order regardless of which transforms end up applied.
    """
    params = params or AugmentationParams()
    rng = np.random.default_rng(rng)
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a 2D grayscale image")
    h, w = img.shape

    do_lr = rng.random() < params.flip_lr_prob
    do_ud = rng.random() < params.flip_ud_prob
    contrast = rng.uniform(*params.contrast_range)
    brightness = rng.uniform(*params.brightness_range)

    out = img.astype(np.float64)
    if do_lr:
        out = out[:, ::-1]
    if do_ud:
        out = out[::-1, :]
    out = contrast * (out - 128.0) + brightness * 128.0
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)

    new_fibers = []
    for fiber in fibers:
        pts = fiber.keypoints.points.copy()
        if do_lr:
            pts[:, 0] = (w - 1) - pts[:, 0]
        if do_ud:
            pts[:, 1] = (h - 1) - pts[:, 1]
        chain = order_keypoints(KeypointChain(pts))
        new_fibers.append(Fiber(chain, width=fiber.width, length=fiber.length))
    return out, new_fibers


def save_gray_png(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError("expected a 2D uint8 image")
    Image.fromarray(image, mode="L").save(path, format="PNG")


def load_gray_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def save_mask_png(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask, dtype=bool)
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    return load_gray_png(path) > 127
