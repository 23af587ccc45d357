import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posref import augment
from posref.augment import (
    MixConfig, empty_block_mask, expand_blocks, label_to_region_cells,
    lesion_gate, mix_images, mix_pseudo_masks,
    sample_mask_position_constrained, sample_mask_probability_driven,
    tpatchmix, weak_augment, strong_photometric,
)
from posref.postext import label_from_cells, parse_positions


def lab(*cells):
    return label_from_cells(cells)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestWeakAugment:
    def test_identity_scale(self):
        img = rng().random((224, 224))
        out, _, rec = weak_augment(img, scale_range=(1.0, 1.0), rng=rng())
        assert rec.scale == 1.0
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_zoom_on_single_pixel_mask(self):
        mask = np.zeros((224, 224))
        mask[112, 112] = 1.0
        img = mask.copy()
        from posref.augment import ZoomRecord
        _, out_mask, _ = weak_augment(img, mask, rng=None,
                                      record=ZoomRecord(2.0, 224, 224))
        ys, xs = np.nonzero(out_mask)
        assert set(ys) == {112, 113} and set(xs) == {112, 113}
        assert out_mask.sum() == 4

    def test_mask_omitted(self):
        _, out_mask, _ = weak_augment(rng().random((224, 224)), rng=rng())
        assert out_mask is None

    def test_replay_same_geometry(self):
        img = rng().random((224, 224))
        out1, _, rec = weak_augment(img, rng=rng(3))
        out2, _, _ = weak_augment(img, record=rec)
        np.testing.assert_array_equal(out1, out2)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            weak_augment(np.zeros((224, 224)), scale_range=(-1.0, -0.5), rng=rng())


class TestStrongPhotometric:
    def test_near_identity(self):
        img = rng().random((32, 32)) * 0.8 + 0.1
        out = strong_photometric(img, rng(), brightness=0.0, contrast=0.0,
                                 blur_sigma_range=(0.0, 0.0))
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_constant_stays_constant(self):
        img = np.full((32, 32), 0.4)
        out = strong_photometric(img, rng(5))
        assert np.allclose(out, out[0, 0])

    def test_clamp(self):
        img = np.full((8, 8), 0.8)

        class FakeRng:
            def uniform(self, lo, hi=None):
                if hi is None:
                    return 0.0
                return 0.5 if lo < 0 else (1.0 if lo <= 1.0 <= hi else 0.0)

        out = strong_photometric(img, FakeRng(), brightness=0.5, contrast=0.0,
                                 blur_sigma_range=(0.0, 0.0))
        assert np.all(out == 1.0)

    def test_range(self):
        img = rng(2).random((64, 64))
        out = strong_photometric(img, rng(7))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestLabelToRegionCells:
    def test_all_ones(self):
        m = label_to_region_cells(np.ones(6, int))
        assert m.sum() == 196

    def test_empty(self):
        assert label_to_region_cells(np.zeros(6, int)).sum() == 0

    def test_upper_left_block_count(self):
        m = label_to_region_cells(lab((0, 0)))
        assert m.sum() == 35  # 5 rows of centers below 74, 7 cols left of 112
        for by, bx in zip(*np.nonzero(m)):
            assert by * 16 + 8 < 74 and bx * 16 + 8 < 112

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            label_to_region_cells(np.ones(6, int), h=225, w=224)


class TestMaskSamplers:
    def test_laterality_conflict_skips(self):
        assert sample_mask_position_constrained(lab((0, 0)), lab((0, 1)), rng()) is None

    def test_empty_donor_skips(self):
        assert sample_mask_position_constrained(lab((0, 0)), np.zeros(6, int), rng()) is None

    def test_forced_ratio_count_and_containment(self):
        m = sample_mask_position_constrained(lab((0, 0)), lab((0, 0)), rng(),
                                             ratio_range=(0.25, 0.25))
        assert m.sum() == 9  # round(0.25 * 35)
        region = label_to_region_cells(lab((0, 0)))
        assert not np.any(m & ~region)

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_containment_property(self, seed):
        r = np.random.default_rng(seed)
        cells = [(int(r.integers(3)), int(r.integers(2)))]
        q_j = lab(*cells)
        m = sample_mask_position_constrained(q_j, q_j, r)
        region = label_to_region_cells(q_j)
        assert m is not None and m.any()
        assert not np.any(m & ~region)

    def test_probability_driven_none(self):
        assert sample_mask_probability_driven(np.zeros((224, 224)), rng()) is None

    def test_probability_driven_all(self):
        m = sample_mask_probability_driven(np.ones((224, 224)), rng(),
                                           ratio_range=(0.5, 0.5))
        assert m.sum() == 98  # round(0.5 * 196)

    def test_probability_driven_single_block(self):
        p = np.zeros((224, 224))
        p[32:48, 64:80] = 1.0
        m = sample_mask_probability_driven(p, rng(), delta_gate=0.5)
        assert m.sum() == 1 and m[2, 4]


class TestLesionGate:
    def test_full_confidence_kept(self):
        m = empty_block_mask(224, 224)
        m[0, 0] = True
        p = np.ones((224, 224))
        kept, r = lesion_gate(p, m, delta_gate=0.5)
        assert kept.any() and abs(r - 256.0 / (256.0 + 1e-6)) < 1e-15

    def test_zero_probability_zeroed(self):
        m = empty_block_mask(224, 224)
        m[0, 0] = True
        kept, r = lesion_gate(np.zeros((224, 224)), m, delta_gate=0.5)
        assert not kept.any() and r == 0.0

    def test_boundary_strictness(self):
        # eps pushes r just below 0.5, so a uniform 0.5 donor fails the gate
        m = empty_block_mask(224, 224)
        m[3, 3] = True
        kept, r = lesion_gate(np.full((224, 224), 0.5), m, delta_gate=0.5)
        assert r < 0.5 and not kept.any()

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            lesion_gate(np.ones((224, 224)), empty_block_mask(224, 224))

    @given(st.integers(0, 500))
    @settings(max_examples=25, deadline=None)
    def test_gate_monotone(self, seed):
        r_ = np.random.default_rng(seed)
        m = empty_block_mask(64, 64, 16)
        m.ravel()[r_.choice(16, size=4, replace=False)] = True
        p = r_.random((64, 64))
        kept, _ = lesion_gate(p, m, delta_gate=0.3, block_size=16)
        kept2, _ = lesion_gate(np.clip(p + 0.1, 0, 1), m, delta_gate=0.3, block_size=16)
        if kept.any():
            assert kept2.any()


def brute_mix(a, b, m, block=16):
    out = np.empty_like(a)
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            out[y, x] = b[y, x] if m[y // block, x // block] else a[y, x]
    return out


class TestMixFormulas:
    def test_all_zero_mask(self):
        a, b = rng(1).random((224, 224)), rng(2).random((224, 224))
        np.testing.assert_array_equal(mix_images(a, b, empty_block_mask(224, 224)), a)

    def test_all_one_mask(self):
        a, b = rng(1).random((224, 224)), rng(2).random((224, 224))
        m = ~empty_block_mask(224, 224)
        np.testing.assert_array_equal(mix_images(a, b, m), b)

    def test_single_block(self):
        a, b = rng(1).random((224, 224)), rng(2).random((224, 224))
        m = empty_block_mask(224, 224)
        m[4, 9] = True
        out = mix_images(a, b, m)
        np.testing.assert_array_equal(out, brute_mix(a, b, m))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_brute_force_agreement(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((64, 64)), r.random((64, 64))
        m = r.random((4, 4)) < 0.4
        np.testing.assert_array_equal(mix_images(a, b, m), brute_mix(a, b, m))

    def test_pseudo_mask_threshold_inclusive(self):
        p = np.full((224, 224), 0.5)
        out = mix_pseudo_masks(p, np.zeros((224, 224)), empty_block_mask(224, 224))
        assert np.all(out == 1.0)

    def test_pseudo_mask_zero_mask(self):
        out = mix_pseudo_masks(np.full((224, 224), 0.6), np.zeros((224, 224)),
                               empty_block_mask(224, 224))
        assert np.all(out == 1.0)

    def test_pseudo_mask_full_mask(self):
        out = mix_pseudo_masks(np.full((224, 224), 0.9), np.full((224, 224), 0.4),
                               ~empty_block_mask(224, 224))
        assert np.all(out == 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mix_images(np.zeros((224, 224)), np.zeros((64, 64)),
                       empty_block_mask(224, 224))


class TestTPatchMix:
    def _pair(self, text, seed):
        r = np.random.default_rng(seed)
        return (r.random((224, 224)), parse_positions(text))

    def test_gate_failure_is_identity(self):
        pair_i = self._pair("upper left lung", 1)
        pair_j = self._pair("upper left lung", 2)
        p = np.zeros((224, 224))
        out = tpatchmix(pair_i, pair_j, p, p, MixConfig(delta_gate=0.99), rng(0))
        assert out.applied is False
        np.testing.assert_array_equal(out.mixed_image, pair_i[0])
        assert out.mixed_text.text == "upper left lung"

    def test_both_samplers_fail(self):
        pair_i = self._pair("upper left lung", 1)
        pair_j = self._pair("upper right lung", 2)
        p = np.zeros((224, 224))
        out = tpatchmix(pair_i, pair_j, p, p, MixConfig(), rng(0))
        assert out.applied is False and out.mode == "none"

    def test_successful_mix_full_path(self):
        pair_i = self._pair("upper left lung", 1)
        pair_j = self._pair("lower right lung", 2)
        p_i = np.full((224, 224), 0.3)
        p_j = np.full((224, 224), 0.9)
        out = tpatchmix(pair_i, pair_j, p_i, p_j, MixConfig(), rng(3))
        assert out.applied is True
        assert "upper left lung and lower right lung" in out.mixed_text.text
        # re-derive the mixed image and pseudo-mask from the outcome's gate
        diff_blocks = np.zeros((14, 14), dtype=bool)
        for by in range(14):
            for bx in range(14):
                blk = (slice(by * 16, by * 16 + 16), slice(bx * 16, bx * 16 + 16))
                diff_blocks[by, bx] = not np.array_equal(out.mixed_image[blk],
                                                         pair_i[0][blk])
        np.testing.assert_array_equal(out.mixed_image,
                                      brute_mix(pair_i[0], pair_j[0], diff_blocks))
        expected_pseudo = ((1 - expand_blocks(diff_blocks)) * p_i
                           + expand_blocks(diff_blocks) * p_j) >= 0.5
        np.testing.assert_array_equal(out.mixed_pseudo_mask, expected_pseudo.astype(float))

    def test_receiver_without_span_appends(self):
        pair_i = self._pair("no infection", 1)
        pair_j = self._pair("lower right lung", 2)
        p = np.full((224, 224), 0.9)
        out = tpatchmix(pair_i, pair_j, p, p, MixConfig(), rng(1))
        assert out.applied is True
        assert out.mixed_text.text == "no infection, lower right lung"

    def test_determinism(self):
        pair_i = self._pair("upper left lung", 1)
        pair_j = self._pair("lower right lung", 2)
        p_i = np.full((224, 224), 0.3)
        p_j = np.full((224, 224), 0.9)
        a = tpatchmix(pair_i, pair_j, p_i, p_j, MixConfig(), rng(11))
        b = tpatchmix(pair_i, pair_j, p_i, p_j, MixConfig(), rng(11))
        np.testing.assert_array_equal(a.mixed_image, b.mixed_image)
        np.testing.assert_array_equal(a.mixed_pseudo_mask, b.mixed_pseudo_mask)
        assert a.mixed_text.text == b.mixed_text.text
        assert (a.applied, a.mode, a.gate_ratio) == (b.applied, b.mode, b.gate_ratio)
