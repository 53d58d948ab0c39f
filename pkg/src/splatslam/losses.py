"""Photometric losses: L1/SSIM blend with analytic image gradients, and PSNR.

SSIM uses an 11x11 Gaussian window (sigma 1.5) and is averaged over the
interior region where the window fits entirely, so image borders never bias
the score. The blended loss is (1 - lambda)*L1 + lambda*(1 - SSIM)/2.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d
from scipy.signal import convolve2d

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
_PAD = SSIM_WIN // 2


def _window1d():
    x = np.arange(SSIM_WIN) - _PAD
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_K1D = _window1d()
_K2D = np.outer(_K1D, _K1D)


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _channels(img):
    if img.ndim == 2:
        return img[:, :, None]
    return img


def _filter_valid(x):
    # separable window; interior of the constant-padded result equals the
    # valid-mode correlation
    out = correlate1d(x, _K1D, axis=0, mode="constant")
    out = correlate1d(out, _K1D, axis=1, mode="constant")
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _adjoint_filter(g):
    # adjoint of the valid-mode correlation with a symmetric kernel
    return convolve2d(g, _K2D, mode="full")


def l1_loss(rendered, observed) -> float:
    a, b = _check_pair(rendered, observed)
    return float(np.mean(np.abs(a - b)))


def _ssim_fields(x, y):
    ux, uy = _filter_valid(x), _filter_valid(y)
    uxx, uyy, uxy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    n1 = 2.0 * ux * uy + SSIM_C1
    n2 = 2.0 * vxy + SSIM_C2
    d1 = ux * ux + uy * uy + SSIM_C1
    d2 = vx + vy + SSIM_C2
    return ux, uy, n1, n2, d1, d2


def ssim(rendered, observed) -> float:
    """Mean structural similarity over the interior region, all channels."""
    a, b = _check_pair(rendered, observed)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN} for SSIM")
    total = 0.0
    a3, b3 = _channels(a), _channels(b)
    for c in range(a3.shape[2]):
        _, _, n1, n2, d1, d2 = _ssim_fields(a3[:, :, c], b3[:, :, c])
        total += float(np.mean(n1 * n2 / (d1 * d2)))
    return total / a3.shape[2]


def ssim_and_grad(rendered, observed):
    """SSIM value and its gradient with respect to the first image."""
    a, b = _check_pair(rendered, observed)
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN} for SSIM")
    a3, b3 = _channels(a), _channels(b)
    nch = a3.shape[2]
    grad = np.zeros_like(a3)
    total = 0.0
    for c in range(nch):
        x, y = a3[:, :, c], b3[:, :, c]
        ux, uy, n1, n2, d1, d2 = _ssim_fields(x, y)
        s = n1 * n2 / (d1 * d2)
        total += float(np.mean(s))
        # d mean(s) / d element of the interior map
        gs = np.full_like(s, 1.0 / (s.size * nch))
        # s as a function of the five filtered moments
        d_ux = gs * (2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1
                     + (-s / d2) * (-2.0 * ux) + (2.0 * n1 / (d1 * d2)) * (-uy))
        d_uxx = gs * (-s / d2)
        d_uxy = gs * (2.0 * n1 / (d1 * d2))
        # pull the interior gradients back through the window
        gx = _adjoint_filter(d_ux)
        gx += _adjoint_filter(d_uxx) * (2.0 * x)
        gx += _adjoint_filter(d_uxy) * y
        grad[:, :, c] = gx
    if rendered.ndim == 2:
        grad = grad[:, :, 0]
    return total / nch, grad


def render_loss(rendered, observed, lambda_ssim: float = 0.2) -> float:
    """Blend of mean absolute error and structural dissimilarity."""
    a, b = _check_pair(rendered, observed)
    out = (1.0 - lambda_ssim) * l1_loss(a, b)
    if lambda_ssim != 0.0:
        out += lambda_ssim * (1.0 - ssim(a, b)) / 2.0
    return float(out)


def render_loss_and_image_grad(rendered, observed, lambda_ssim: float = 0.2):
    """Loss value and its gradient with respect to the rendered image."""
    a, b = _check_pair(rendered, observed)
    diff = a - b
    loss = (1.0 - lambda_ssim) * float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim != 0.0:
        s, gs = ssim_and_grad(a, b)
        loss += lambda_ssim * (1.0 - s) / 2.0
        grad += lambda_ssim * (-0.5) * gs
    return float(loss), grad


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 100."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return min(100.0, 10.0 * np.log10(1.0 / mse))
