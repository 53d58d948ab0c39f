"""Loss blend, SSIM against an external reference, and gradient checks."""

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from splatslam.losses import (
    l1_loss,
    psnr,
    render_loss,
    render_loss_and_image_grad,
    ssim,
    ssim_and_grad,
)


def random_pair(rng, h=48, w=40, channels=3):
    shape = (h, w, channels) if channels else (h, w)
    a = rng.uniform(0.05, 0.95, size=shape)
    b = np.clip(a + rng.normal(scale=0.05, size=shape), 0, 1)
    return a, b


def skimage_ssim(a, b):
    kwargs = dict(data_range=1.0, gaussian_weights=True, sigma=1.5,
                  use_sample_covariance=False)
    if a.ndim == 3:
        return structural_similarity(a, b, channel_axis=2, **kwargs)
    return structural_similarity(a, b, **kwargs)


class TestSSIM:
    def test_identical_images(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(size=(32, 32, 3))
        np.testing.assert_allclose(ssim(a, a.copy()), 1.0, atol=1e-12)

    def test_matches_reference_grayscale(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a, b = random_pair(rng, channels=0)
            np.testing.assert_allclose(ssim(a, b), skimage_ssim(a, b), atol=1e-6)

    def test_matches_reference_rgb(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a, b = random_pair(rng)
            np.testing.assert_allclose(ssim(a, b), skimage_ssim(a, b), atol=1e-6)

    def test_too_small_rejected(self):
        a = np.zeros((8, 8))
        with pytest.raises(ValueError):
            ssim(a, a)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a, b = random_pair(rng, h=16, w=14)
        _, g = ssim_and_grad(a, b)
        h = 1e-6
        for _ in range(60):
            i, j, c = (rng.integers(0, n) for n in a.shape)
            ap, am = a.copy(), a.copy()
            ap[i, j, c] += h
            am[i, j, c] -= h
            fd = (ssim(ap, b) - ssim(am, b)) / (2 * h)
            np.testing.assert_allclose(g[i, j, c], fd, rtol=1e-4, atol=1e-9)


class TestRenderLoss:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(24, 24, 3))
        assert render_loss(a, a.copy()) == 0.0

    def test_pure_l1_uniform_offset(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0.1, 0.8, size=(20, 20, 3))
        np.testing.assert_allclose(render_loss(a + 0.1, a, lambda_ssim=0.0), 0.1,
                                   atol=1e-12)

    def test_matches_reference_blend(self):
        rng = np.random.default_rng(6)
        lam = 0.2
        for _ in range(3):
            a, b = random_pair(rng)
            ref = (1 - lam) * np.mean(np.abs(a - b)) + lam * (1 - skimage_ssim(a, b)) / 2
            np.testing.assert_allclose(render_loss(a, b, lam), ref, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            render_loss(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))

    def test_image_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a, b = random_pair(rng, h=16, w=14)
        loss, g = render_loss_and_image_grad(a, b, lambda_ssim=0.2)
        np.testing.assert_allclose(loss, render_loss(a, b, 0.2), atol=1e-12)
        h = 1e-6
        for _ in range(60):
            i, j, c = (rng.integers(0, n) for n in a.shape)
            ap, am = a.copy(), a.copy()
            ap[i, j, c] += h
            am[i, j, c] -= h
            fd = (render_loss(ap, b, 0.2) - render_loss(am, b, 0.2)) / (2 * h)
            np.testing.assert_allclose(g[i, j, c], fd, rtol=1e-4, atol=1e-9)


class TestPSNR:
    def test_identical_capped(self):
        a = np.random.default_rng(8).uniform(size=(16, 16, 3))
        assert psnr(a, a.copy()) == 100.0

    def test_uniform_difference(self):
        a = np.full((16, 16, 3), 0.5)
        np.testing.assert_allclose(psnr(a, a + 0.1), 20.0, atol=1e-9)

    def test_matches_reference(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            a, b = random_pair(rng)
            ref = peak_signal_noise_ratio(a, b, data_range=1.0)
            np.testing.assert_allclose(psnr(a, b), ref, atol=1e-9)

    def test_l1_helper(self):
        a = np.zeros((4, 4))
        b = np.full((4, 4), 0.25)
        assert l1_loss(a, b) == 0.25
