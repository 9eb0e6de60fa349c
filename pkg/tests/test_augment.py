import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decoseg.augment import (StrongExample, binary_mask, combinatorial_crop, crop_resize, expected_count,
                             powerset_nonempty, propose_boxes, resize_image, resize_mask, tight_box)
from decoseg.synth import BACKGROUND


def _random_strong_set(rng, n_images=None, max_labels=3, size=(12, 12)):
    out = []
    for i in range(n_images or int(rng.integers(1, 6))):
        k = int(rng.integers(1, max_labels + 1))
        classes = sorted(rng.choice(6, size=k, replace=False).tolist())
        mask = np.full(size, BACKGROUND, dtype=np.uint8)
        for c in classes:
            y, x = rng.integers(0, size[0] - 2), rng.integers(0, size[1] - 2)
            mask[y:y + int(rng.integers(1, 4)), x:x + int(rng.integers(1, 4))] = c
        present = tuple(sorted(int(v) for v in np.unique(mask) if v != BACKGROUND))
        out.append(StrongExample(rng.random((3, *size)), mask, present, f"s{i}"))
    return out


def _brute_force_count(strong_set, n_p):
    """One triple per (image, nonempty subset, sample), plus the originals."""
    triples = []
    for i, ex in enumerate(strong_set):
        labels = ex.labels
        for r in range(1, len(labels) + 1):
            for subset in itertools.combinations(labels, r):
                for k in range(n_p):
                    triples.append((i, subset, k))
    return len(strong_set) + len(triples)


class TestPowerset:
    @pytest.mark.parametrize("n", range(0, 13))
    def test_size(self, n):
        assert len(powerset_nonempty(range(n))) == 2 ** n - 1

    def test_binary_counting_order(self):
        assert powerset_nonempty([5, 2, 9]) == [(2,), (5,), (2, 5), (9,), (2, 9), (5, 9), (2, 5, 9)]

    def test_singleton(self):
        assert powerset_nonempty([3]) == [(3,)]

    def test_duplicates_collapse(self):
        assert powerset_nonempty([1, 1]) == [(1,)]

    def test_guard(self):
        with pytest.raises(ValueError, match="13 labels"):
            powerset_nonempty(range(13))


class TestMasksAndBoxes:
    def test_binary_mask(self):
        full = np.array([[0, 1, BACKGROUND], [2, 1, 0]], dtype=np.uint8)
        np.testing.assert_array_equal(binary_mask(full, [0, 2]), [[1, 0, 0], [1, 0, 1]])

    def test_binary_mask_absent_label(self):
        with pytest.raises(ValueError, match=r"\[3\]"):
            binary_mask(np.zeros((2, 2), np.uint8), [0, 3])

    def test_tight_box(self):
        z = np.zeros((6, 8), np.uint8)
        z[2:4, 1:6] = 1
        assert tight_box(z) == (1, 2, 6, 4)

    def test_tight_box_empty(self):
        with pytest.raises(ValueError, match="no foreground"):
            tight_box(np.zeros((3, 3)))

    def test_zero_margin_gives_tight_box(self):
        z = np.zeros((10, 10), np.uint8)
        z[3:5, 4:8] = 1
        assert set(propose_boxes(z, 5, np.random.default_rng(0), m_max=0.0)) == {(4, 3, 8, 5)}

    def test_negative_margin(self):
        with pytest.raises(ValueError):
            propose_boxes(np.ones((3, 3)), 1, np.random.default_rng(0), m_max=-0.1)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_boxes_contain_foreground(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(2, 30, size=2)
        z = (rng.random((h, w)) < rng.uniform(0.01, 0.5)).astype(np.uint8)
        if not z.any():
            z[rng.integers(h), rng.integers(w)] = 1
        x0, y0, x1, y1 = tight_box(z)
        for bx0, by0, bx1, by1 in propose_boxes(z, 4, rng):
            assert 0 <= bx0 <= x0 and x1 <= bx1 <= w
            assert 0 <= by0 <= y0 and y1 <= by1 <= h
            # every foreground pixel lies inside the crop
            assert z[by0:by1, bx0:bx1].sum() == z.sum()

    def test_margin_bounded(self):
        z = np.zeros((100, 100), np.uint8)
        z[40:50, 30:50] = 1
        for x0, y0, x1, y1 in propose_boxes(z, 200, np.random.default_rng(1), m_max=0.5):
            assert 30 - x0 <= 10 and x1 - 50 <= 10
            assert 40 - y0 <= 5 and y1 - 50 <= 5


class TestResize:
    def test_identity_size(self):
        img = np.random.default_rng(0).random((3, 5, 7))
        np.testing.assert_array_equal(resize_image(img, (5, 7)), img)

    def test_constant_image_stays_constant(self):
        out = resize_image(np.full((2, 5, 9), 0.25), (16, 16))
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_bilinear_midpoint(self):
        img = np.array([[[0.0, 1.0]]])
        out = resize_image(img, (1, 4))
        np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0])

    def test_mask_nearest_stays_binary(self):
        z = (np.random.default_rng(2).random((7, 11)) < 0.5).astype(np.uint8)
        out = resize_mask(z, (16, 16))
        assert set(np.unique(out)) <= {0, 1}

    def test_mask_upsample_blocks(self):
        z = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        np.testing.assert_array_equal(resize_mask(z, (4, 4)), np.kron(z, np.ones((2, 2), np.uint8)))

    def test_crop_resize_shapes(self):
        img, z = crop_resize(np.zeros((3, 20, 20)), np.ones((20, 20), np.uint8), (2, 3, 9, 17), (8, 8))
        assert img.shape == (3, 8, 8) and z.shape == (8, 8)


class TestCombinatorialCrop:
    def test_formula_example(self):
        mask = np.full((8, 8), BACKGROUND, np.uint8)
        mask[1:3, 1:3] = 0
        mask[5:7, 4:7] = 2
        ex = StrongExample(np.zeros((3, 8, 8)), mask, (0, 2))
        assert len(combinatorial_crop([ex], 3, (8, 8))) == 10 == expected_count([2], 3)

    def test_zero_np_gives_originals(self):
        ss = _random_strong_set(np.random.default_rng(0), n_images=4)
        out = combinatorial_crop(ss, 0, (12, 12))
        assert len(out) == 4
        assert [s.box for s in out] == [(0, 0, 12, 12)] * 4
        assert [s.labels for s in out] == [ex.labels for ex in ss]

    def test_negative_np(self):
        with pytest.raises(ValueError):
            combinatorial_crop([], -1)

    @pytest.mark.parametrize("seed", range(200))
    def test_count_law_against_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        ss = _random_strong_set(rng)
        n_p = int(rng.integers(0, 5))
        out = combinatorial_crop(ss, n_p, (8, 8), rng_seed=seed)
        assert len(out) == _brute_force_count(ss, n_p) == expected_count([len(e.labels) for e in ss], n_p)

    def test_order_and_masks(self):
        ss = _random_strong_set(np.random.default_rng(5), n_images=3)
        n_p = 2
        out = combinatorial_crop(ss, n_p, (12, 12), rng_seed=1)
        pos = 0
        for i, ex in enumerate(ss):
            assert out[pos].source == i and out[pos].labels == ex.labels
            pos += 1
            for subset in powerset_nonempty(ex.labels):
                for _ in range(n_p):
                    s = out[pos]
                    assert s.source == i and s.labels == subset
                    x0, y0, x1, y1 = s.box
                    z = binary_mask(ex.mask, subset)
                    assert z[y0:y1, x0:x1].sum() == z.sum()
                    assert s.mask.shape == (12, 12) and set(np.unique(s.mask)) <= {0, 1}
                    assert s.mask.any()
                    pos += 1
        assert pos == len(out)

    def test_deterministic(self):
        ss = _random_strong_set(np.random.default_rng(3), n_images=3)
        a = combinatorial_crop(ss, 4, (10, 10), rng_seed=9)
        b = combinatorial_crop(ss, 4, (10, 10), rng_seed=9)
        assert [s.box for s in a] == [s.box for s in b]
        assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))

    def test_pair_streams_independent_of_other_images(self):
        ss = _random_strong_set(np.random.default_rng(4), n_images=3)
        full = combinatorial_crop(ss, 3, (10, 10), rng_seed=2)
        first = combinatorial_crop(ss[:1], 3, (10, 10), rng_seed=2)
        assert [s.box for s in full[:len(first)]] == [s.box for s in first]

    def test_single_class_images_use_singleton_powerset(self):
        mask = np.full((8, 8), BACKGROUND, np.uint8)
        mask[2:5, 2:6] = 1
        out = combinatorial_crop([StrongExample(np.zeros((3, 8, 8)), mask, (1,))], 5, (8, 8))
        assert len(out) == 6
        assert all(s.labels == (1,) for s in out)


class TestStrongExample:
    def test_label_mismatch(self):
        mask = np.full((4, 4), BACKGROUND, np.uint8)
        mask[0, 0] = 2
        with pytest.raises(ValueError, match="differ"):
            StrongExample(np.zeros((3, 4, 4)), mask, (1,), "x1")

    def test_background_only_rejected(self):
        with pytest.raises(ValueError, match="no foreground"):
            StrongExample(np.zeros((3, 4, 4)), np.full((4, 4), BACKGROUND, np.uint8), (), "x2")
