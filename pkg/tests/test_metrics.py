"""PSNR, SSIM, depth MAE."""

import math

import numpy as np
import pytest

from defield.metrics import depth_mae, psnr, ssim


class TestPsnr:
    def test_identical_is_inf(self):
        a = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        assert math.isinf(psnr(a, a.copy()))

    def test_known_mse(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01
        np.testing.assert_allclose(psnr(a, b), 20.0, rtol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (8, 8, 3))
        b = rng.uniform(0, 1, (8, 8, 3))
        mse = np.mean((a - b) ** 2)
        np.testing.assert_allclose(
            psnr(a, b), 10 * np.log10(1.0 / mse), rtol=1e-12
        )

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (6, 6))
        b = rng.uniform(0, 1, (6, 6))
        assert psnr(a, b) == psnr(b, a)


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(0).uniform(0, 1, (24, 24, 3))
        np.testing.assert_allclose(ssim(a, a.copy()), 1.0, atol=1e-12)

    def test_negative_for_inverted_structure(self):
        rng = np.random.default_rng(1)
        a = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
        assert ssim(a, 1.0 - a) < 0.0

    def test_matches_bruteforce_window_oracle(self):
        # hand-rolled windowed SSIM on a small pattern
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (14, 14))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        size, sigma = 11, 1.5
        half = (size - 1) / 2.0
        x = np.arange(size) - half
        g = np.exp(-(x ** 2) / (2 * sigma ** 2))
        win = np.outer(g, g)
        win /= win.sum()
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        vals = []
        for i in range(14 - size + 1):
            for j in range(14 - size + 1):
                pa = a[i:i + size, j:j + size]
                pb = b[i:i + size, j:j + size]
                mu_a = np.sum(win * pa)
                mu_b = np.sum(win * pb)
                va = np.sum(win * pa * pa) - mu_a ** 2
                vb = np.sum(win * pb * pb) - mu_b ** 2
                cov = np.sum(win * pa * pb) - mu_a * mu_b
                vals.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
                )
        np.testing.assert_allclose(ssim(a, b), np.mean(vals), rtol=1e-10)

    def test_luminance_shift_tolerance(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.2, 0.7, (32, 32))
        shifted = ssim(a + 0.05, a)
        # constant shifts barely move SSIM thanks to the C constants
        assert abs(ssim(a, a) - shifted) < 0.2
        b = rng.uniform(0.2, 0.7, (32, 32))
        np.testing.assert_allclose(
            ssim(a + 0.05, b + 0.05), ssim(a, b), atol=1e-3
        )

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1, (16, 16, 3))
        b = rng.uniform(0, 1, (16, 16, 3))
        np.testing.assert_allclose(ssim(a, b), ssim(b, a), rtol=1e-12)

    def test_at_most_one(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = rng.uniform(0, 1, (16, 16))
            b = rng.uniform(0, 1, (16, 16))
            assert ssim(a, b) <= 1.0


class TestDepthMae:
    def test_identical_zero(self):
        d = np.random.default_rng(0).uniform(1, 4, (8, 8))
        assert depth_mae(d, d.copy()) == 0.0

    def test_constant_offset(self):
        d = np.random.default_rng(1).uniform(1, 4, (8, 8))
        np.testing.assert_allclose(depth_mae(d + 0.3, d), 0.3, rtol=1e-12)

    def test_masked(self):
        d = np.ones((4, 4))
        ref = np.ones((4, 4))
        ref[0, 0] = 5.0
        mask = np.ones((4, 4), dtype=bool)
        mask[0, 0] = False
        assert depth_mae(d, ref, mask) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(1, 3, (6, 6))
        b = rng.uniform(1, 3, (6, 6))
        assert depth_mae(a, b) == depth_mae(b, a)

    def test_empty_mask(self):
        d = np.ones((2, 2))
        assert depth_mae(d, d + 1, np.zeros((2, 2), dtype=bool)) == 0.0
