import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmmas.augment import (
    AugmentationPolicy,
    AugOp,
    MixedSample,
    brightness_contrast_jitter,
    center_crop,
    channel_shuffle,
    flip_arrays,
    gaussian_blur,
    random_flip,
    random_intensity_shift,
    strong_augment,
    tumor_cutmix,
    tumor_protect_crop,
    weak_augment,
    weak_policy,
)
from gmmas.errors import ValidationError
from gmmas.volumes import CaseLabels, MultimodalVolume, SegmentationMask

from conftest import make_sample


class TestFlip:
    def test_double_flip_is_identity(self, small_sample, rng):
        once = random_flip(small_sample, (1.0, 0.0, 0.0), rng)
        twice = random_flip(once, (1.0, 0.0, 0.0), rng)
        assert np.array_equal(twice.volume.voxels, small_sample.volume.voxels)
        assert np.array_equal(twice.mask.labels, small_sample.mask.labels)

    def test_zero_probs_identity(self, small_sample, rng):
        out = random_flip(small_sample, (0.0, 0.0, 0.0), rng)
        assert np.array_equal(out.volume.voxels, small_sample.volume.voxels)

    def test_flip_matches_index_reversal_oracle(self):
        # asymmetric 4^3 array flipped on axis 0 == arr[::-1] (array-level op)
        arr = np.arange(4 * 4 * 4 * 4, dtype=np.float32).reshape(4, 4, 4, 4)
        mask = np.arange(4 * 4 * 4).reshape(4, 4, 4).astype(np.uint8) % 4
        flipped_v, flipped_m = flip_arrays(arr, mask, axes=[0])
        assert np.array_equal(flipped_v, arr[:, ::-1])
        assert np.array_equal(flipped_m, mask[::-1])

    def test_mask_and_voxels_move_together(self, rng):
        # transform an indicator: a tumor voxel must track its intensity voxel
        s = make_sample(shape=(8, 8, 8), tumor_box=((1, 2), (2, 3), (3, 4)))
        out = random_flip(s, (1.0, 1.0, 1.0), rng)
        src = s.volume.voxels[0, 1, 2, 3]
        (ix,) = np.argwhere(out.mask.labels > 0)
        assert out.volume.voxels[0][tuple(ix)] == src


class TestTumorProtectCrop:
    def test_single_voxel_contained(self, rng):
        s = make_sample(shape=(32, 32, 32), tumor_box=((20, 21), (3, 4), (17, 18)))
        for _ in range(10):
            out = tumor_protect_crop(s, (16, 16, 16), rng)
            assert (out.mask.labels > 0).sum() == 1

    def test_no_tumor_uniform_fallback(self, rng):
        s = make_sample(shape=(32, 32, 32), tumor_box=((0, 0), (0, 0), (0, 0)))
        assert not (s.mask.labels > 0).any()
        out = tumor_protect_crop(s, (16, 16, 16), rng)
        assert out.volume.shape == (16, 16, 16)

    def test_oversized_tumor_centers_on_centroid(self, rng):
        # bbox 20^3 > window 16^3: crop origin = clamp(round(centroid - w/2))
        s = make_sample(shape=(32, 32, 32), tumor_box=((6, 26), (6, 26), (6, 26)))
        out = tumor_protect_crop(s, (16, 16, 16), rng)
        centroid = [float(ix.mean()) for ix in np.nonzero(s.mask.labels)]
        expect_origin = [
            int(np.clip(round(c - 8), 0, 32 - 16)) for c in centroid
        ]
        sl = tuple(slice(o, o + 16) for o in expect_origin)
        assert np.array_equal(out.volume.voxels, s.volume.voxels[(slice(None),) + sl])

    def test_window_larger_than_volume_rejected(self, small_sample, rng):
        with pytest.raises(ValidationError):
            tumor_protect_crop(small_sample, (32, 32, 32), rng)

    def test_window_divisibility_enforced(self, rng):
        s = make_sample(shape=(32, 32, 32))
        with pytest.raises(ValidationError):
            tumor_protect_crop(s, (12, 16, 16), rng)

    @given(seed=st.integers(0, 2000))
    @settings(max_examples=25, deadline=None)
    def test_tumor_bbox_always_contained_when_it_fits(self, seed):
        r = np.random.default_rng(seed)
        lo = r.integers(0, 26, size=3)
        hi = lo + r.integers(1, 6, size=3)
        s = make_sample(shape=(32, 32, 32), tumor_box=tuple(zip(lo.tolist(), hi.tolist())))
        out = tumor_protect_crop(s, (16, 16, 16), r)
        assert (out.mask.labels > 0).sum() == (s.mask.labels > 0).sum()


class TestIntensityShift:
    def test_zero_shift_identity(self, small_sample, rng):
        out = random_intensity_shift(small_sample, 0.0, rng)
        assert np.array_equal(out.volume.voxels, small_sample.volume.voxels)

    def test_absent_modality_stays_zero(self, rng):
        s = make_sample(presence=(False, True, True, True))
        out = random_intensity_shift(s, 0.3, rng)
        assert np.all(out.volume.voxels[0] == 0.0)

    def test_known_shift_elementwise_oracle(self):
        # rig the rng so u = +0.1 for every modality
        class FixedRng:
            def uniform(self, lo=-1.0, hi=1.0):
                return 0.1

        s = make_sample(shape=(8, 8, 8))
        out = random_intensity_shift(s, 0.5, FixedRng())
        v = s.volume.voxels
        expected = v.copy()
        nz = v != 0
        expected[nz] = np.minimum(v[nz] + 0.1, 1.0)
        assert np.allclose(out.volume.voxels, expected, atol=1e-7)

    def test_invalid_max_shift(self, small_sample, rng):
        with pytest.raises(ValidationError):
            random_intensity_shift(small_sample, 1.0, rng)


class TestChannelShuffle:
    def test_identity_permutation(self, small_sample, rng):
        out = channel_shuffle(small_sample, rng, permutation=(0, 1, 2, 3))
        assert np.array_equal(out.volume.voxels, small_sample.volume.voxels)

    def test_permutation_then_inverse(self, small_sample, rng):
        perm = (2, 3, 0, 1)
        out = channel_shuffle(small_sample, rng, permutation=perm)
        back = channel_shuffle(out, rng, permutation=perm)  # self-inverse permutation
        assert np.array_equal(back.volume.voxels, small_sample.volume.voxels)

    def test_explicit_permutation_matches_manual_reindex(self, small_sample, rng):
        out = channel_shuffle(small_sample, rng, permutation=(2, 3, 0, 1))
        manual = small_sample.volume.voxels[np.array([2, 3, 0, 1])]
        assert np.array_equal(out.volume.voxels, manual)

    def test_presence_permutes_identically(self, rng):
        s = make_sample(presence=(False, True, True, True))
        out = channel_shuffle(s, rng, permutation=(1, 0, 2, 3))
        assert out.volume.modality_presence == (True, False, True, True)
        assert np.all(out.volume.voxels[1] == 0.0)


class TestJitterBlur:
    def test_unit_jitter_identity(self, small_sample):
        class FixedRng:
            def __init__(self):
                self.calls = 0

            def uniform(self, lo, hi):
                # brightness draw then contrast draw, per modality
                self.calls += 1
                return 0.0 if self.calls % 2 == 1 else 1.0

        out = brightness_contrast_jitter(small_sample, FixedRng(), 0.2, (1.0, 1.0))
        assert np.allclose(out.volume.voxels, small_sample.volume.voxels, atol=1e-7)

    def test_blur_sigma_zero_identity(self, small_sample):
        class ZeroRng:
            def uniform(self, lo, hi):
                return 0.0

        out = gaussian_blur(small_sample, ZeroRng(), (0.0, 1.0))
        assert np.allclose(out.volume.voxels, small_sample.volume.voxels, atol=1e-6)

    def test_blur_preserves_mask(self, small_sample, rng):
        out = gaussian_blur(small_sample, rng, (0.5, 0.5))
        assert np.array_equal(out.mask.labels, small_sample.mask.labels)


class TestTumorCutmix:
    def _pair(self):
        rec = make_sample(
            shape=(16, 16, 16), seed=1, tumor_box=((1, 5), (1, 5), (1, 5)),
            labels=CaseLabels(grade=0, idh=1), case_id="rec",
        )
        don = make_sample(
            shape=(16, 16, 16), seed=2, tumor_box=((10, 13), (10, 13), (10, 13)),
            labels=CaseLabels(grade=1), case_id="don",
        )
        return rec, don

    def test_lambda_matches_voxel_recount(self, rng):
        rec, don = self._pair()
        mixed = tumor_cutmix(rec, don, rng)
        region = tuple(slice(lo, hi + 1) for lo, hi in mixed.provenance.region)
        pasted = int((mixed.mask.labels[region] > 0).sum())
        total = int((mixed.mask.labels > 0).sum())
        lam = pasted / total
        expected = (1 - lam) * np.array([1.0, 0.0]) + lam * np.array([0.0, 1.0])
        assert np.allclose(mixed.soft_labels["grade"], expected)

    def test_exact_lambda_no_overlap_fixture(self):
        # 60 recipient + 40 pasted donor tumor voxels, disjoint -> lambda = 0.4
        rec_vox = np.full((4, 16, 16, 16), 0.5, dtype=np.float32)
        rec_lab = np.zeros((16, 16, 16), dtype=np.uint8)
        rec_lab[0:1, 0:6, 0:10] = 2          # 60 voxels in a corner slab
        don_vox = np.full((4, 16, 16, 16), 0.7, dtype=np.float32)
        don_lab = np.zeros((16, 16, 16), dtype=np.uint8)
        don_lab[8:10, 8:12, 8:13] = 1        # 2*4*5 = 40 voxel block
        from gmmas.augment import Sample

        rec = Sample(MultimodalVolume(rec_vox, (True,) * 4, case_id="r"),
                     SegmentationMask(rec_lab), CaseLabels(grade=0))
        don = Sample(MultimodalVolume(don_vox, (True,) * 4, case_id="d"),
                     SegmentationMask(don_lab), CaseLabels(grade=1))
        for seed in range(30):
            mixed = tumor_cutmix(rec, don, np.random.default_rng(seed), margin=2)
            region = tuple(slice(lo, hi + 1) for lo, hi in mixed.provenance.region)
            outside = mixed.mask.labels.copy()
            outside[region] = 0
            if int((outside > 0).sum()) == 60:  # pasted box missed the recipient tumor
                assert np.allclose(mixed.soft_labels["grade"], [0.6, 0.4])
                return
        pytest.fail("no non-overlapping paste found across seeds")

    def test_self_mix_keeps_labels(self, rng):
        rec, _ = self._pair()
        mixed = tumor_cutmix(rec, rec, rng)
        assert np.allclose(mixed.soft_labels["grade"], [1.0, 0.0])
        assert np.allclose(mixed.soft_labels["idh"], [0.0, 1.0])

    def test_missing_label_propagates(self, rng):
        rec, don = self._pair()
        mixed = tumor_cutmix(rec, don, rng)
        assert mixed.soft_labels["idh"] is None      # donor lacks idh
        assert mixed.soft_labels["mgmt"] is None

    def test_donor_without_tumor_rejected(self, rng):
        rec, don = self._pair()
        empty = make_sample(shape=(16, 16, 16), tumor_box=((0, 0), (0, 0), (0, 0)))
        with pytest.raises(ValidationError):
            tumor_cutmix(rec, empty, rng)

    def test_soft_labels_form_simplex(self, rng):
        rec, don = self._pair()
        for seed in range(20):
            mixed = tumor_cutmix(rec, don, np.random.default_rng(seed))
            for task, vec in mixed.soft_labels.items():
                if vec is not None:
                    assert vec.min() >= 0 and abs(vec.sum() - 1) < 1e-9


class TestPolicies:
    def test_policy_json_round_trip(self):
        p = weak_policy((16, 16, 16), seed=5)
        back = AugmentationPolicy.from_json(p.to_json())
        assert back.to_json() == p.to_json()

    def test_policy_deterministic_in_seed_and_index(self, small_sample):
        p = AugmentationPolicy(
            ops=[AugOp("flip", 0.5, {}), AugOp("intensity_shift", 0.8, {"max_shift": 0.2})],
            rng_seed=3,
        )
        a = p.apply(small_sample, sample_index=4)
        b = p.apply(small_sample, sample_index=4)
        c = p.apply(small_sample, sample_index=5)
        assert np.array_equal(a.volume.voxels, b.volume.voxels)
        assert not np.array_equal(a.volume.voxels, c.volume.voxels)

    def test_weak_all_probs_zero_is_center_crop(self, rng):
        s = make_sample(shape=(32, 32, 32), tumor_box=((2, 4), (2, 4), (2, 4)))
        p = weak_policy((16, 16, 16), flip_prob=0.0, crop_prob=0.0, scale_prob=0.0)
        out = p.apply(s)
        expected = center_crop(s, (16, 16, 16))
        assert np.array_equal(out.volume.voxels, expected.volume.voxels)

    def test_weak_preserves_shape_divisibility(self, rng):
        s = make_sample(shape=(32, 32, 32), tumor_box=((2, 4), (2, 4), (2, 4)))
        out = weak_augment(s, rng, (16, 16, 16))
        assert all(d % 8 == 0 for d in out.volume.shape)

    def test_strong_augment_runs_and_keeps_mask_values(self, rng):
        s = make_sample(shape=(32, 32, 32), tumor_box=((4, 10), (4, 10), (4, 10)))
        donor = make_sample(shape=(32, 32, 32), seed=9, tumor_box=((20, 24), (20, 24), (20, 24)),
                            labels=CaseLabels(grade=1))
        out = strong_augment(s, rng, (16, 16, 16), donor=donor)
        mask = out.mask.labels
        assert set(np.unique(mask).tolist()) <= {0, 1, 2, 3}
        assert out.volume.shape == (16, 16, 16)

    def test_strong_blur_limit_identity(self):
        # blur gated on with sigma range collapsed to ~0 stays near-identity
        s = make_sample(shape=(16, 16, 16))
        p = AugmentationPolicy(ops=[AugOp("gaussian_blur", 1.0, {"sigma_range": [0.0, 0.0]})])
        out = p.apply(s)
        assert np.allclose(out.volume.voxels, s.volume.voxels, atol=1e-6)

    def test_unit_contrast_zero_brightness_identity(self):
        s = make_sample(shape=(16, 16, 16))
        p = AugmentationPolicy(
            ops=[AugOp("brightness_contrast", 1.0, {"brightness": 0.0, "contrast": [1.0, 1.0]})]
        )
        out = p.apply(s)
        assert np.allclose(out.volume.voxels, s.volume.voxels, atol=1e-7)
