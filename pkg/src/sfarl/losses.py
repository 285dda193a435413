"""Training losses and image-quality metrics: MSE, SSIM, negative SSIM, PSNR.

SSIM here uses uniform (unweighted) window statistics with the sample
(N_p - 1) variance normalization, averaged over all windows on a stride grid.
The negative-SSIM gradient is analytic and exact for that definition: terms
that differentiate the window means carry a 1/N_p factor while terms that
differentiate the (co)variances carry 1/(N_p - 1); using a single shared
prefactor fails a finite-difference check at any useful tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grids import _full_corr


@dataclass(frozen=True)
class SsimConfig:
    window: int = 8
    stride: int = 1
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be positive")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("stabilizers c1, c2 must be positive")


DEFAULT_SSIM = SsimConfig()


def mse(x: np.ndarray, gt: np.ndarray) -> float:
    """Half squared error, 0.5 * ||x - gt||^2."""
    _check_pair(x, gt)
    d = x - gt
    return 0.5 * float(np.dot(d.ravel(), d.ravel()))


def mse_grad(x: np.ndarray, gt: np.ndarray) -> np.ndarray:
    _check_pair(x, gt)
    return x - gt


def psnr(x: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images on [0, 1].

    Returns +inf when the images are identical.
    """
    _check_pair(x, gt)
    err = float(np.mean((x - gt) ** 2))
    if err == 0.0:
        return math.inf
    return -10.0 * math.log10(err)


def _check_pair(x, gt):
    if x.shape != gt.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {gt.shape}")


def _window_stats(x: np.ndarray, y: np.ndarray, cfg: SsimConfig):
    """Per-window means, (co)variances and the four SSIM building blocks."""
    h, w = x.shape
    k, s = cfg.window, cfg.stride
    if k > h or k > w:
        raise ValueError(f"window {k} does not fit image {x.shape}")
    xw = sliding_window_view(x, (k, k))[::s, ::s]
    yw = sliding_window_view(y, (k, k))[::s, ::s]
    n = k * k
    mu_x = xw.mean(axis=(-2, -1))
    mu_y = yw.mean(axis=(-2, -1))
    xc = xw - mu_x[..., None, None]
    yc = yw - mu_y[..., None, None]
    var_x = np.sum(xc * xc, axis=(-2, -1)) / (n - 1)
    var_y = np.sum(yc * yc, axis=(-2, -1)) / (n - 1)
    cov = np.sum(xc * yc, axis=(-2, -1)) / (n - 1)
    a1 = 2.0 * mu_x * mu_y + cfg.c1
    a2 = 2.0 * cov + cfg.c2
    b1 = mu_x * mu_x + mu_y * mu_y + cfg.c1
    b2 = var_x + var_y + cfg.c2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim(x: np.ndarray, gt: np.ndarray, cfg: SsimConfig = DEFAULT_SSIM) -> float:
    """Mean per-window structural similarity over the stride grid."""
    _check_pair(x, gt)
    _, _, a1, a2, b1, b2 = _window_stats(x, gt, cfg)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def neg_ssim(x: np.ndarray, gt: np.ndarray, cfg: SsimConfig = DEFAULT_SSIM) -> float:
    return -ssim(x, gt, cfg)


def neg_ssim_grad(x: np.ndarray, gt: np.ndarray, cfg: SsimConfig = DEFAULT_SSIM) -> np.ndarray:
    """Gradient of -SSIM(x, gt) with respect to x.

    Inside one window the gradient is affine in the pixel values,
    kx * x_p + ky * y_p + kc with per-window scalars, so the overlapping
    accumulation reduces to three box scatters of those scalar maps.
    """
    _check_pair(x, gt)
    mu_x, mu_y, a1, a2, b1, b2 = _window_stats(x, gt, cfg)
    k, s = cfg.window, cfg.stride
    n = k * k
    m = n - 1
    kx = -2.0 * a1 * a2 / (m * b1 * b2 * b2)
    ky = 2.0 * a1 / (m * b1 * b2)
    kc = (-kx * mu_x - ky * mu_y
          + 2.0 * a2 * (mu_y * b1 - mu_x * a1) / (n * b1 * b1 * b2))
    n_windows = mu_x.size
    grad = (x * _box_scatter(kx, x.shape, k, s)
            + gt * _box_scatter(ky, x.shape, k, s)
            + _box_scatter(kc, x.shape, k, s))
    return -grad / n_windows


def _box_scatter(window_map: np.ndarray, shape, window: int, stride: int) -> np.ndarray:
    """Sum a per-window scalar over every pixel each window covers."""
    h, w = shape
    dense = np.zeros((h - window + 1, w - window + 1))
    dense[::stride, ::stride] = window_map
    return _full_corr(dense, np.ones((window, window)))


def loss_value(name: str, x: np.ndarray, gt: np.ndarray,
               cfg: SsimConfig = DEFAULT_SSIM) -> float:
    if name == "mse":
        return mse(x, gt)
    if name == "neg_ssim":
        return neg_ssim(x, gt, cfg)
    raise ValueError(f"unknown loss {name!r}")


def loss_grad(name: str, x: np.ndarray, gt: np.ndarray,
              cfg: SsimConfig = DEFAULT_SSIM) -> np.ndarray:
    if name == "mse":
        return mse_grad(x, gt)
    if name == "neg_ssim":
        return neg_ssim_grad(x, gt, cfg)
    raise ValueError(f"unknown loss {name!r}")
