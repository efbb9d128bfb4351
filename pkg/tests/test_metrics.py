import math

import numpy as np
import pytest
from oracles import brute_force_ssim

from volsr.corruption import slice_mask
from volsr.metrics import (
    central_crop,
    cubic_interpolate,
    evaluate_cohort,
    psnr,
    ssim,
)
from volsr.volume import Volume


class TestPsnr:
    def test_identical_inputs_infinite(self):
        x = np.random.default_rng(0).random((4, 4, 4))
        assert psnr(x, x) == math.inf

    def test_zero_vs_one_is_zero_db(self):
        assert psnr(np.zeros((3, 3, 3)), np.ones((3, 3, 3)), peak=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a = rng.random((5, 6, 4))
            b = rng.random((5, 6, 4))
            expected = 10.0 * math.log10(1.0 / np.mean((a - b) ** 2))
            assert psnr(a, b) == pytest.approx(expected, abs=1e-10)

    def test_monotone_in_noise_amplitude(self):
        rng = np.random.default_rng(2)
        a = rng.random((6, 6, 6))
        noise = rng.normal(size=a.shape)
        values = [psnr(a, a + amp * noise) for amp in (0.01, 0.05, 0.1, 0.5)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


class TestSsim:
    def test_identity_is_one(self):
        x = np.random.default_rng(3).random((12, 12, 12))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        mu1, mu2 = 0.2, 0.8
        a = np.full((12, 12, 12), mu1)
        b = np.full((12, 12, 12), mu2)
        c1 = 0.01**2
        expected = (2 * mu1 * mu2 + c1) / (mu1**2 + mu2**2 + c1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.random((13, 12, 13))
        b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(brute_force_ssim(a, b), abs=1e-8)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a = rng.random((12, 12, 12))
        b = rng.random((12, 12, 12))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)

    def test_window_too_large_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)), window_size=11)

    def test_accepts_volumes(self):
        v = Volume(data=np.random.default_rng(6).random((12, 12, 12)))
        assert ssim(v, v) == pytest.approx(1.0)


class TestCubicInterpolate:
    def _mask_for(self, shape, k, axis=0):
        v = Volume(data=np.zeros(shape))
        _, mask = slice_mask(v, axis=axis, k=k)
        return mask

    def test_k1_identity(self):
        v = Volume(data=np.random.default_rng(7).random((8, 4, 4)))
        masked, mask = slice_mask(v, axis=0, k=1)
        out = cubic_interpolate(masked, mask, axis=0)
        np.testing.assert_array_equal(out.data, v.data)

    def test_linear_ramp_exact(self):
        ramp = np.broadcast_to(np.arange(16.0)[:, None, None] / 15.0, (16, 4, 4)).copy()
        v = Volume(data=ramp)
        for k in (2, 4):
            masked, mask = slice_mask(v, axis=0, k=k)
            out = cubic_interpolate(masked, mask, axis=0)
            np.testing.assert_allclose(out.data, ramp, atol=1e-12)

    def test_cubic_polynomial_recovered_interior(self):
        t = np.arange(16.0)
        profile = 0.02 * t**3 - 0.3 * t**2 + t + 2.0
        data = np.broadcast_to(profile[:, None, None], (16, 3, 3)).copy()
        v = Volume(data=data)
        masked, mask = slice_mask(v, axis=0, k=2)
        out = cubic_interpolate(masked, mask, axis=0)
        interior = slice(0, 15)  # last retained index is 14; slice 15 is extrapolated
        np.testing.assert_allclose(out.data[interior], data[interior], atol=1e-10)

    def test_retained_slices_never_modified(self):
        rng = np.random.default_rng(8)
        v = Volume(data=rng.random((12, 5, 5)))
        masked, mask = slice_mask(v, axis=0, k=3)
        out = cubic_interpolate(masked, mask, axis=0)
        for i in range(0, 12, 3):
            np.testing.assert_array_equal(out.data[i], v.data[i])

    def test_too_few_slices_rejected(self):
        v = Volume(data=np.random.default_rng(9).random((4, 4, 4)))
        mask = np.zeros((4, 4, 4))
        mask[0] = 1.0
        with pytest.raises(ValueError, match="at least 2"):
            cubic_interpolate(v, mask, axis=0)

    def test_partial_slice_mask_rejected(self):
        v = Volume(data=np.random.default_rng(10).random((4, 4, 4)))
        mask = np.zeros((4, 4, 4))
        mask[0] = 1.0
        mask[2, 0, 0] = 1.0
        with pytest.raises(ValueError, match="slice pattern"):
            cubic_interpolate(v, mask, axis=0)

    def test_other_axis(self):
        rng = np.random.default_rng(11)
        v = Volume(data=rng.random((4, 12, 4)))
        masked, mask = slice_mask(v, axis=1, k=2)
        out = cubic_interpolate(masked, mask, axis=1)
        for i in range(0, 12, 2):
            np.testing.assert_array_equal(out.data[:, i, :], v.data[:, i, :])


class TestEvaluateCohort:
    def test_single_pair_zero_se(self):
        rng = np.random.default_rng(12)
        a = Volume(data=rng.random((16, 16, 16)))
        b = Volume(data=rng.random((16, 16, 16)))
        rep = evaluate_cohort([a], [b], region=12, method="m", corruption="c")
        assert rep.n == 1
        assert rep.psnr_se == 0.0 and rep.ssim_se == 0.0
        assert rep.psnr_mean == pytest.approx(psnr(central_crop(a.data, 12), central_crop(b.data, 12)))

    def test_identical_pairs_zero_variance(self):
        rng = np.random.default_rng(13)
        a = Volume(data=rng.random((16, 16, 16)))
        b = Volume(data=rng.random((16, 16, 16)))
        rep = evaluate_cohort([a, a], [b, b], region=12)
        assert rep.psnr_se == 0.0 and rep.ssim_se == 0.0

    def test_matches_statistics_oracle(self):
        rng = np.random.default_rng(14)
        truths = [Volume(data=rng.random((16, 16, 16))) for _ in range(10)]
        recons = [Volume(data=np.clip(t.data + 0.1 * rng.normal(size=t.shape), 0, 1)) for t in truths]
        rep = evaluate_cohort(truths, recons, region=12)
        p = [psnr(central_crop(t.data, 12), central_crop(r.data, 12)) for t, r in zip(truths, recons)]
        s = [ssim(central_crop(t.data, 12), central_crop(r.data, 12)) for t, r in zip(truths, recons)]
        assert rep.psnr_mean == pytest.approx(np.mean(p), abs=1e-12)
        assert rep.ssim_mean == pytest.approx(np.mean(s), abs=1e-12)
        assert rep.psnr_se == pytest.approx(np.std(p, ddof=1) / math.sqrt(10), abs=1e-12)
        assert rep.ssim_se == pytest.approx(np.std(s, ddof=1) / math.sqrt(10), abs=1e-12)

    def test_length_mismatch_rejected(self):
        a = Volume(data=np.zeros((16, 16, 16)))
        with pytest.raises(ValueError, match="length"):
            evaluate_cohort([a], [a, a], region=12)

    def test_crop_size_validated(self):
        a = Volume(data=np.zeros((8, 8, 8)))
        with pytest.raises(ValueError, match="crop"):
            evaluate_cohort([a], [a], region=12)
