"""Corruption battery: kernel math, blur properties, Rayleigh statistics."""

import math

import numpy as np
import pytest
from scipy import stats

from bayeseg.degrade import (
    DegradationSpec,
    apply_degradation,
    brightness_contrast,
    gaussian_blur,
    gaussian_kernel,
    rayleigh_sample,
    rician_noise_apply,
)
from bayeseg.rng import RngStream


class TestGaussianKernel:
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.6, 4.4])
    def test_sums_to_one(self, sigma):
        k = gaussian_kernel(sigma)
        assert k.sum() == pytest.approx(1.0, abs=1e-6)

    def test_radius_is_three_sigma(self):
        assert gaussian_kernel(1.0).shape == (7, 7)
        assert gaussian_kernel(2.6).shape == (17, 17)

    def test_symmetry(self):
        k = gaussian_kernel(1.7)
        np.testing.assert_allclose(k, k.T, atol=1e-15)
        np.testing.assert_allclose(k, k[::-1, :], atol=1e-15)
        np.testing.assert_allclose(k, k[:, ::-1], atol=1e-15)

    def test_center_value_before_normalization(self):
        sigma = 1.0
        radius = math.ceil(3 * sigma)
        coords = np.arange(-radius, radius + 1, dtype=np.float64)
        xx, yy = np.meshgrid(coords, coords)
        raw = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)
        assert raw[radius, radius] == pytest.approx(1.0 / (2.0 * math.pi), abs=1e-12)
        assert raw[radius, radius] == pytest.approx(0.159155, abs=1e-6)
        np.testing.assert_allclose(gaussian_kernel(sigma), raw / raw.sum(), atol=1e-15)

    def test_nonpositive_sigma_rejected(self):
        for bad in (0.0, -1.0):
            with pytest.raises(ValueError):
                gaussian_kernel(bad)


class TestGaussianBlur:
    def test_constant_image_unchanged(self):
        img = np.full((20, 20), 0.42)
        out = gaussian_blur(img, 2.6)
        np.testing.assert_allclose(out, 0.42, atol=1e-6)

    def _tv(self, img):
        return np.abs(np.diff(img, axis=0)).sum() + np.abs(np.diff(img, axis=1)).sum()

    @pytest.mark.parametrize("sigma", [1.0, 2.6, 4.4])
    def test_reduces_total_variation(self, sigma):
        rng = RngStream(1, 91)
        img = np.clip(rng.uniform(0, 1, (24, 24), dtype=np.float64), 0, 1)
        assert self._tv(gaussian_blur(img, sigma)) <= self._tv(img)

    def test_linearity(self):
        rng = RngStream(2, 92)
        a = rng.uniform(0, 1, (16, 16), dtype=np.float64)
        b = rng.uniform(0, 1, (16, 16), dtype=np.float64)
        lhs = gaussian_blur(0.3 * a + 0.6 * b, 1.5)
        rhs = 0.3 * gaussian_blur(a, 1.5) + 0.6 * gaussian_blur(b, 1.5)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_matches_explicit_kernel_convolution(self):
        rng = RngStream(3, 93)
        img = rng.uniform(0, 1, (10, 10), dtype=np.float64)
        sigma = 0.8
        k = gaussian_kernel(sigma)
        r = k.shape[0] // 2
        padded = np.pad(img, r, mode="reflect")
        want = np.zeros_like(img)
        for y in range(10):
            for x in range(10):
                want[y, x] = (padded[y:y + 2 * r + 1, x:x + 2 * r + 1] * k).sum()
        np.testing.assert_allclose(gaussian_blur(img, sigma), want, atol=1e-12)

    def test_operating_points_supported(self):
        img = RngStream(4, 94).uniform(0, 1, (32, 32), dtype=np.float64)
        for sigma in (2.6, 4.4):
            out = np.clip(gaussian_blur(img, sigma), 0, 1)
            assert out.shape == img.shape
            assert np.isfinite(out).all()


class TestRayleigh:
    def test_samples_nonnegative(self):
        s = rayleigh_sample(0.3, 10_000, RngStream(5, 95))
        assert (s >= 0).all()

    def test_mean_matches_analytic(self):
        s = rayleigh_sample(0.3, 1_000_000, RngStream(6, 96))
        want = 0.3 * math.sqrt(math.pi / 2.0)
        assert want == pytest.approx(0.376, abs=1e-3)
        assert abs(s.mean() - want) / want < 0.01

    def test_ks_statistic_against_analytic_cdf(self):
        sigma = 0.3
        s = np.sort(rayleigh_sample(sigma, 1_000_000, RngStream(7, 97)))
        cdf = 1.0 - np.exp(-s * s / (2 * sigma * sigma))
        n = s.size
        up = np.arange(1, n + 1) / n
        lo = np.arange(0, n) / n
        ks = max(np.abs(up - cdf).max(), np.abs(cdf - lo).max())
        assert ks < 0.002

    def test_chi_square_goodness_of_fit(self):
        """50 equal-probability bins of the analytic CDF, p > 0.01."""
        sigma = 0.7
        n = 1_000_000
        s = rayleigh_sample(sigma, n, RngStream(8, 98))
        qs = np.linspace(0, 1, 51)
        edges = sigma * np.sqrt(-2.0 * np.log1p(-qs[:-1]))  # inverse CDF
        edges = np.append(edges, np.inf)
        counts, _ = np.histogram(s, bins=edges)
        expected = n / 50.0
        chi2 = ((counts - expected) ** 2 / expected).sum()
        p = stats.chi2.sf(chi2, df=49)
        assert p > 0.01

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            rayleigh_sample(0.0, 10, RngStream(0))


class TestRicianNoise:
    def test_vanishing_sigma_keeps_image(self):
        img = RngStream(9, 99).uniform(0.1, 0.8, (12, 12), dtype=np.float64)
        out = rician_noise_apply(img, 1e-9, RngStream(10, 100))
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_noise_is_additive_nonnegative(self):
        img = np.full((16, 16), 0.2)
        out = rician_noise_apply(img, 0.3, RngStream(11, 101))
        assert (out >= img - 1e-12).all()
        assert out.mean() > img.mean()

    def test_output_clamped(self):
        img = np.full((16, 16), 0.9)
        out = rician_noise_apply(img, 0.5, RngStream(12, 102))
        assert (out <= 1.0).all() and (out >= 0.0).all()

    def test_deterministic_given_seed(self):
        img = RngStream(13, 103).uniform(0, 1, (8, 8), dtype=np.float64)
        a = rician_noise_apply(img, 0.3, RngStream(14, 104))
        b = rician_noise_apply(img, 0.3, RngStream(14, 104))
        assert (a == b).all()


class TestBrightnessContrast:
    def test_identity(self):
        img = RngStream(15, 105).uniform(0, 1, (8, 8), dtype=np.float64)
        np.testing.assert_allclose(brightness_contrast(img, 0.0, 1.0), img)

    def test_brightness_on_midgray(self):
        img = np.full((4, 4), 0.5)
        np.testing.assert_allclose(brightness_contrast(img, 0.2, 1.0), 0.7, atol=1e-12)

    def test_gain_doubles_deviation_preclamp(self):
        img = np.array([[0.4, 0.6]])
        out = brightness_contrast(img, 0.0, 2.0)
        np.testing.assert_allclose(out, [[0.3, 0.7]], atol=1e-12)

    def test_nonpositive_gain_rejected(self):
        with pytest.raises(ValueError):
            brightness_contrast(np.zeros((2, 2)), 0.0, 0.0)


class TestDegradationSpec:
    def test_all_kinds_map_unit_interval_to_unit_interval(self):
        img = RngStream(16, 106).uniform(0, 1, (32, 32), dtype=np.float64)
        specs = [
            DegradationSpec(kind="none"),
            DegradationSpec(kind="blur", blur_sigma=2.6),
            DegradationSpec(kind="rician", noise_sigma=0.3, seed=5),
            DegradationSpec(kind="brightness_contrast", brightness_delta=0.2,
                            contrast_gain=1.5),
        ]
        for spec in specs:
            out = apply_degradation(img, spec)
            assert out.min() >= 0.0 and out.max() <= 1.0, spec.kind

    def test_identity_spec(self):
        img = RngStream(17, 107).uniform(0, 1, (8, 8), dtype=np.float64)
        out = apply_degradation(img, DegradationSpec(kind="none"))
        assert (out == img).all()

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError):
            DegradationSpec(kind="blur", blur_sigma=-1.0)
        with pytest.raises(ValueError):
            DegradationSpec(kind="rician")
        with pytest.raises(ValueError):
            DegradationSpec(kind="warp")

    def test_spec_ids(self):
        assert DegradationSpec(kind="blur", blur_sigma=4.4).id == "blur_4.4"
        assert DegradationSpec(kind="none").id == "clean"
        assert DegradationSpec(kind="rician", noise_sigma=0.3).param == "0.3"
