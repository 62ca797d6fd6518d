"""Image-quality metrics: PSNR and SSIM (with its image gradient for the training loss)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

from volsplat.config import settings
from volsplat.exceptions import UsageError


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, cap: float | None = None) -> float:
    """10·log10(1/MSE) over all channels, capped for identical images."""
    a, b = _check_pair(a, b)
    cap = settings.psnr_cap if cap is None else cap
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)


@lru_cache(maxsize=8)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _blur(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = correlate1d(image, window, axis=0, mode="constant")
    return correlate1d(out, window, axis=1, mode="constant")


class _SsimTerms:
    """Local statistics of one image pair; maps are full size, valid region marked by ``crop``."""

    def __init__(self, a: np.ndarray, b: np.ndarray) -> None:
        size = settings.ssim_window
        if min(a.shape[0], a.shape[1]) < size:
            raise UsageError(f"Images of {a.shape[1]}x{a.shape[0]} are smaller than the {size}px SSIM window")
        self.window = gaussian_window(size, settings.ssim_sigma)
        half = size // 2
        self.crop = (slice(half, a.shape[0] - half), slice(half, a.shape[1] - half))
        self.c1 = settings.ssim_k1 ** 2
        self.c2 = settings.ssim_k2 ** 2
        self.a, self.b = a, b
        self.mu_a = _blur(a, self.window)
        self.mu_b = _blur(b, self.window)
        var_a = _blur(a * a, self.window) - self.mu_a ** 2
        var_b = _blur(b * b, self.window) - self.mu_b ** 2
        cov = _blur(a * b, self.window) - self.mu_a * self.mu_b
        self.a1 = 2.0 * self.mu_a * self.mu_b + self.c1
        self.a2 = 2.0 * cov + self.c2
        self.b1 = self.mu_a ** 2 + self.mu_b ** 2 + self.c1
        self.b2 = var_a + var_b + self.c2
        self.map = self.a1 * self.a2 / (self.b1 * self.b2)

    def value(self) -> float:
        return float(np.mean(self.map[self.crop]))

    def grad_a(self) -> np.ndarray:
        """d mean(SSIM) / d a."""
        d_map = np.zeros_like(self.map)
        d_map[self.crop] = 1.0 / self.map[self.crop].size
        denom = self.b1 * self.b2
        s = self.map
        d_mu = d_map * (
            (2.0 * self.mu_b * self.a2 - 2.0 * self.mu_b * self.a1) / denom
            - s * (2.0 * self.mu_a / self.b1 - 2.0 * self.mu_a / self.b2)
        )
        d_sq = d_map * (-s / self.b2)
        d_cross = d_map * (2.0 * self.a1 / denom)
        # the window is symmetric, so the adjoint of the blur is the blur itself
        return _blur(d_mu, self.window) + 2.0 * self.a * _blur(d_sq, self.window) + self.b * _blur(d_cross, self.window)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11×11 windows (σ 1.5) and channels, dynamic range 1."""
    a, b = _check_pair(a, b)
    return _SsimTerms(a, b).value()


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to the first image."""
    a, b = _check_pair(a, b)
    terms = _SsimTerms(a, b)
    return terms.value(), terms.grad_a()
