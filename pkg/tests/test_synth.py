import filecmp
import json

import numpy as np
import pytest
from PIL import Image

from decoseg.synth import (BACKGROUND, CLASS_NAMES, RING_INNER, SQUARE_HALF, SPLITS, DatasetConfig,
                           DatasetError, Shape, gen_dataset, load_dataset, read_manifest, sample_scene,
                           stack_labels)

from conftest import SMALL_DATA


def _area_and_perimeter(shape):
    r = shape.radius
    kind = CLASS_NAMES[shape.cls]
    if kind == "disk":
        return np.pi * r * r, 2 * np.pi * r
    if kind == "square":
        a = SQUARE_HALF * r
        return 4 * a * a, 8 * a
    if kind == "ring":
        return np.pi * r * r * (1 - RING_INNER ** 2), 2 * np.pi * r * (1 + RING_INNER)
    return 3 * np.sqrt(3) / 4 * r * r, 3 * np.sqrt(3) * r


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


class TestShapes:
    @pytest.mark.parametrize("cls", range(4))
    def test_single_shape_area(self, cls):
        cfg = DatasetConfig(noise=0.0, shapes_per_image=(1, 1))
        ys, xs = np.mgrid[0:64, 0:64] + 0.5
        rng = np.random.default_rng(cls)
        for _ in range(25):
            r = rng.uniform(*cfg.radius_range)
            shape = Shape(cls, rng.uniform(r, 64 - r), rng.uniform(r, 64 - r), r, rng.uniform(0, 2 * np.pi))
            area, perimeter = _area_and_perimeter(shape)
            assert abs(shape.inside(xs, ys).sum() - area) <= perimeter

    def test_generated_masks_match_analytic_area(self, tmp_path):
        cfg = DatasetConfig(n_weak=0, n_strong=30, n_test=0, noise=0.0, shapes_per_image=(1, 1), seed=11)
        gen_dataset(cfg, tmp_path)
        for i, ex in enumerate(load_dataset(tmp_path, "strong")):
            scene = sample_scene(cfg, np.random.default_rng([cfg.seed, SPLITS.index("strong"), i]))
            (shape,) = scene.shapes
            area, perimeter = _area_and_perimeter(shape)
            fg = np.count_nonzero(ex.mask != BACKGROUND)
            assert abs(fg - area) <= perimeter
            assert ex.label_set == [shape.cls]

    def test_later_shapes_occlude(self):
        cfg = DatasetConfig(noise=0.0, shapes_per_image=(3, 3))
        ys, xs = np.mgrid[0:64, 0:64] + 0.5
        for seed in range(20):
            scene = sample_scene(cfg, np.random.default_rng(seed))
            top = scene.shapes[-1]
            assert np.all(scene.mask[top.inside(xs, ys)] == top.cls)

    def test_noise_free_colors_per_class(self):
        cfg = DatasetConfig(noise=0.0, color_jitter=0.0)
        scene = sample_scene(cfg, np.random.default_rng(4))
        for c in scene.labels:
            colors = np.unique(scene.image[scene.mask == c].round(6), axis=0)
            assert len(colors) == 1


class TestGenerate:
    def test_layout_and_manifest(self, small_dataset):
        manifest = read_manifest(small_dataset)
        assert manifest["num_classes"] == 3
        assert manifest["image_size"] == [16, 16]
        counts = {s: sum(e["split"] == s for e in manifest["examples"]) for s in SPLITS}
        assert counts == {"weak": 12, "strong": 9, "test": 6}
        for e in manifest["examples"]:
            assert (small_dataset / e["image"]).is_file()
            assert (e["mask"] is None) == (e["kind"] == "weak")

    def test_labels_are_mask_classes(self, small_dataset):
        for ex in load_dataset(small_dataset, "strong") + load_dataset(small_dataset, "test"):
            present = sorted(int(v) for v in np.unique(ex.mask) if v != BACKGROUND)
            assert ex.label_set == present
            assert present

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = DatasetConfig(n_weak=5, n_strong=3, n_test=2, seed=4)
        gen_dataset(cfg, tmp_path / "a")
        gen_dataset(cfg, tmp_path / "b")
        assert _same_tree(tmp_path / "a", tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        gen_dataset(DatasetConfig(n_weak=3, n_strong=0, n_test=0, seed=1), tmp_path / "a")
        gen_dataset(DatasetConfig(n_weak=3, n_strong=0, n_test=0, seed=2), tmp_path / "b")
        assert not _same_tree(tmp_path / "a", tmp_path / "b")

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DatasetError):
            gen_dataset(DatasetConfig(n_weak=1, n_strong=0, n_test=0), blocker / "sub")

    @pytest.mark.parametrize("kwargs", [dict(num_classes=0), dict(num_classes=5), dict(n_weak=-1),
                                        dict(n_weak=0, n_strong=0, n_test=0),
                                        dict(shapes_per_image=(2, 1)), dict(radius_range=(5, 40))])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            DatasetConfig(**kwargs)


class TestLoad:
    def test_roundtrip_labels(self, small_dataset):
        manifest = read_manifest(small_dataset)
        loaded = {e.id: e for e in load_dataset(small_dataset)}
        for entry in manifest["examples"]:
            np.testing.assert_array_equal(loaded[entry["id"]].labels, entry["labels"])

    def test_pixels_normalized(self, small_dataset):
        ex = load_dataset(small_dataset, "weak")[0]
        raw = np.asarray(Image.open(small_dataset / "weak" / "images" / f"{ex.id}.png"))
        np.testing.assert_array_equal(ex.image, raw.transpose(2, 0, 1) / 255.0)
        assert ex.image.min() >= 0 and ex.image.max() <= 1

    def test_255_maps_to_one(self, tmp_path):
        gen_dataset(DatasetConfig(n_weak=1, n_strong=0, n_test=0), tmp_path)
        path = tmp_path / "weak" / "images" / "weak_00000.png"
        Image.fromarray(np.full((64, 64, 3), 255, np.uint8)).save(path)
        assert np.all(load_dataset(tmp_path, "weak")[0].image == 1.0)

    def test_split_and_id_filters(self, small_dataset):
        assert len(load_dataset(small_dataset, "test")) == 6
        assert [e.id for e in load_dataset(small_dataset, ids=["strong_00002"])] == ["strong_00002"]
        assert stack_labels(load_dataset(small_dataset, "weak")).shape == (12, 3)

    def _copy(self, src, dst):
        import shutil
        shutil.copytree(src, dst)
        return dst

    def test_corrupt_mask_names_example(self, small_dataset, tmp_path):
        root = self._copy(small_dataset, tmp_path / "d")
        ex = load_dataset(root, "strong")[4]
        mask = ex.mask.copy()
        present = ex.label_set
        mask[mask == present[0]] = BACKGROUND     # drop a labelled class
        Image.fromarray(mask, mode="L").save(root / "strong" / "masks" / f"{ex.id}.png")
        with pytest.raises(DatasetError, match=ex.id):
            load_dataset(root)

    def test_garbage_mask_file(self, small_dataset, tmp_path):
        root = self._copy(small_dataset, tmp_path / "d")
        (root / "strong" / "masks" / "strong_00001.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="strong_00001"):
            load_dataset(root, "strong")

    def test_invalid_class_value(self, small_dataset, tmp_path):
        root = self._copy(small_dataset, tmp_path / "d")
        mask = np.full((16, 16), 7, np.uint8)
        Image.fromarray(mask, mode="L").save(root / "test" / "masks" / "test_00000.png")
        with pytest.raises(DatasetError, match="test_00000.*invalid class"):
            load_dataset(root, "test")

    def test_missing_image(self, small_dataset, tmp_path):
        root = self._copy(small_dataset, tmp_path / "d")
        (root / "weak" / "images" / "weak_00003.png").unlink()
        with pytest.raises(DatasetError, match="weak_00003"):
            load_dataset(root, "weak")

    def test_missing_index(self, tmp_path):
        with pytest.raises(DatasetError, match="index.json"):
            load_dataset(tmp_path)

    def test_wrong_format(self, tmp_path):
        (tmp_path / "index.json").write_text(json.dumps({"format": "other", "version": 1}))
        with pytest.raises(DatasetError, match="unsupported"):
            load_dataset(tmp_path)
