import json

import numpy as np
import pytest

from fiberlab.dataset_io import (
    AugmentationParams,
    DatasetManifest,
    FiberRecord,
    ImageRecord,
    SchemaVersionError,
    SubsetFlags,
    aggregate_loop_subsets,
    augment,
    load_annotations,
    load_gray_png,
    load_mask_png,
    save_annotations,
    save_gray_png,
    save_mask_png,
    split_dataset,
)
from fiberlab.geometry import Fiber, KeypointChain, spline_length


def fiber_record(offset=0.0, score=None):
    pts = np.array([[1.0 + offset, 2.0], [11.0 + offset, 6.0], [21.0 + offset, 2.0]])
    return FiberRecord(keypoints=pts, width_px=4.0, length_px=21.0, score=score)


def small_manifest(n_images=3, provenance="manual", flags=None):
    flags = flags or SubsetFlags()
    images = [
        ImageRecord(file_name=f"img_{i:03d}.png", width_px=64, height_px=48,
                    flags=flags, fibers=[fiber_record(i)])
        for i in range(n_images)
    ]
    return DatasetManifest(provenance=provenance, images=images)


class TestRoundTrip:
    def test_save_load_save_identical(self, tmp_path):
        manifest = small_manifest(4)
        manifest.images[1].fibers[0].score = 0.75
        manifest.images[1].fibers[0].mask_path = "masks/img_001_0.png"
        manifest.images[2].fibers[0].keypoints_pruned = np.array([[0.0, 0.0], [5.0, 5.0]])
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_annotations(manifest, p1)
        loaded = load_annotations(p1)
        save_annotations(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.provenance == manifest.provenance
        assert len(loaded.images) == 4
        assert np.array_equal(loaded.images[0].fibers[0].keypoints,
                              manifest.images[0].fibers[0].keypoints)
        assert loaded.images[1].fibers[0].score == 0.75

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "empty.json"
        save_annotations(DatasetManifest(provenance="synthetic"), path)
        loaded = load_annotations(path)
        assert loaded.images == []
        assert loaded.provenance == "synthetic"

    def test_negative_width_names_record(self, tmp_path):
        manifest = small_manifest(2)
        path = tmp_path / "bad.json"
        save_annotations(manifest, path)
        doc = json.loads(path.read_text())
        doc["images"][1]["fibers"][0]["width_px"] = -3.0
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match=r"images\[1\].fibers\[0\]"):
            load_annotations(path)

    def test_unknown_schema_version(self, tmp_path):
        path = tmp_path / "v99.json"
        path.write_text(json.dumps({"schema_version": 99, "provenance": "manual",
                                    "images": []}))
        with pytest.raises(SchemaVersionError):
            load_annotations(path)

    def test_parse_error_carries_location(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"schema_version": 1,\n  "images": [}')
        with pytest.raises(ValueError, match="line 2"):
            load_annotations(path)

    def test_duplicate_file_names_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            DatasetManifest(provenance="manual", images=[
                ImageRecord(file_name="a.png", width_px=4, height_px=4),
                ImageRecord(file_name="a.png", width_px=4, height_px=4),
            ])


class TestSplit:
    @pytest.mark.parametrize("n,train,test", [(236, 200, 36), (107, 90, 17), (10, 8, 2)])
    def test_floor_ceil_counts(self, n, train, test):
        manifest = small_manifest(n)
        out = split_dataset(manifest, rng=0)
        splits = [rec.split for rec in out.images]
        assert splits.count("train") == train
        assert splits.count("test") == test

    def test_partition_property(self):
        manifest = small_manifest(37)
        out = split_dataset(manifest, train_fraction=0.85, rng=7)
        assert all(rec.split in ("train", "test") for rec in out.images)
        assert {rec.file_name for rec in out.images} == \
               {rec.file_name for rec in manifest.images}

    def test_per_subset_split(self):
        flags_a = SubsetFlags("no", "no", "no")
        flags_b = SubsetFlags("no", "yes", "no")
        images = (
            [ImageRecord(f"a{i}.png", 8, 8, flags=flags_a) for i in range(20)]
            + [ImageRecord(f"b{i}.png", 8, 8, flags=flags_b) for i in range(10)]
        )
        out = split_dataset(DatasetManifest("manual", images), rng=1)
        for prefix, n_train in (("a", 17), ("b", 8)):
            group = [r for r in out.images if r.file_name.startswith(prefix)]
            assert sum(r.split == "train" for r in group) == n_train

    def test_seeded_shuffle_deterministic(self):
        manifest = small_manifest(40)
        a = split_dataset(manifest, rng=42)
        b = split_dataset(manifest, rng=42)
        assert [r.split for r in a.images] == [r.split for r in b.images]

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            split_dataset(small_manifest(4), train_fraction=1.0)


class TestAggregateLoopSubsets:
    def _loop_manifest(self, n_images, n_fibers_total, prefix):
        per = [n_fibers_total // n_images] * n_images
        for i in range(n_fibers_total - sum(per)):
            per[i] += 1
        flags = SubsetFlags(loops="yes", clutter="no", overlaps="no")
        images = [
            ImageRecord(f"{prefix}_{i:03d}.png", 64, 48, flags=flags,
                        fibers=[fiber_record(j) for j in range(per[i])])
            for i in range(n_images)
        ]
        return DatasetManifest("manual", images)

    def test_table_counts(self):
        manifests = [self._loop_manifest(22, 23, "s1"), self._loop_manifest(2, 5, "s2"),
                     self._loop_manifest(11, 13, "s3"), self._loop_manifest(9, 34, "s4")]
        merged = aggregate_loop_subsets(manifests)
        assert len(merged.images) == 44
        assert sum(len(rec.fibers) for rec in merged.images) == 75
        assert all(rec.flags == SubsetFlags("yes", "random", "random")
                   for rec in merged.images)

    def test_single_input_identity(self):
        manifest = self._loop_manifest(5, 6, "solo")
        merged = aggregate_loop_subsets([manifest])
        assert len(merged.images) == 5
        assert merged.images[0].flags == SubsetFlags("yes", "random", "random")

    def test_non_loop_input_rejected(self):
        with pytest.raises(ValueError):
            aggregate_loop_subsets([small_manifest(3)])


class TestAugment:
    def _fiber(self):
        pts = np.array([[10.0, 5.0], [40.0, 20.0], [80.0, 10.0]])
        chain = KeypointChain(pts)
        return Fiber(chain, width=4.0, length=spline_length(chain))

    def _image(self, w=100, h=60):
        rng = np.random.default_rng(3)
        return rng.integers(0, 255, size=(h, w), dtype=np.uint8)

    def test_flip_lr_coordinate_map(self):
        img = self._image()
        fiber = self._fiber()
        params = AugmentationParams(flip_lr_prob=1.0, flip_ud_prob=0.0,
                                    contrast_range=(1.0, 1.0), brightness_range=(1.0, 1.0))
        out_img, out_fibers = augment(img, [fiber], params, rng=0)
        assert np.array_equal(out_img, img[:, ::-1])
        xs = sorted(out_fibers[0].keypoints.points[:, 0])
        assert xs == sorted(99.0 - fiber.keypoints.points[:, 0])
        first = out_fibers[0].keypoints.points[0]
        last = out_fibers[0].keypoints.points[-1]
        assert (first[1], first[0]) <= (last[1], last[0])

    def test_double_flip_is_involution(self):
        img = self._image()
        fiber = self._fiber()
        params = AugmentationParams(flip_lr_prob=1.0, flip_ud_prob=1.0,
                                    contrast_range=(1.0, 1.0), brightness_range=(1.0, 1.0))
        once_img, once_fibers = augment(img, [fiber], params, rng=0)
        twice_img, twice_fibers = augment(once_img, once_fibers, params, rng=1)
        assert np.array_equal(twice_img, img)
        got = {tuple(p) for p in twice_fibers[0].keypoints.points.tolist()}
        want = {tuple(p) for p in fiber.keypoints.points.tolist()}
        assert got == want

    def test_identity_transform(self):
        img = self._image()
        params = AugmentationParams(flip_lr_prob=0.0, flip_ud_prob=0.0,
                                    contrast_range=(1.0, 1.0), brightness_range=(1.0, 1.0))
        out_img, _ = augment(img, [self._fiber()], params, rng=0)
        assert np.array_equal(out_img, img)

    def test_ordering_postcondition_and_length_preserved(self):
        rng = np.random.default_rng(9)
        img = self._image()
        for seed in range(40):
            pts = rng.uniform(5, 55, size=(6, 2))
            chain = KeypointChain(pts)
            fiber = Fiber(chain, width=3.0, length=spline_length(chain))
            _, out = augment(img, [fiber], rng=seed)
            p = out[0].keypoints.points
            assert (p[0, 1], p[0, 0]) <= (p[-1, 1], p[-1, 0])
            assert spline_length(out[0].keypoints) == pytest.approx(
                spline_length(chain), abs=1e-6)
            assert out[0].width == fiber.width
            assert out[0].length == fiber.length

    def test_brightness_contrast_transfer(self):
        img = np.full((10, 10), 100, dtype=np.uint8)
        params = AugmentationParams(flip_lr_prob=0.0, flip_ud_prob=0.0,
                                    contrast_range=(1.5, 1.5), brightness_range=(0.5, 0.5))
        out_img, _ = augment(img, [], params, rng=0)
        # 1.5 * (100 - 128) + 0.5 * 128 = 22
        assert (out_img == 22).all()


class TestPngHelpers:
    def test_gray_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(20, 30), dtype=np.uint8)
        save_gray_png(img, tmp_path / "img.png")
        assert np.array_equal(load_gray_png(tmp_path / "img.png"), img)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        mask = rng.random((15, 25)) > 0.5
        save_mask_png(mask, tmp_path / "mask.png")
        assert np.array_equal(load_mask_png(tmp_path / "mask.png"), mask)
