"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np

from .blur import ssim

PSNR_CLAMP = 99.0


def psnr(a, b) -> float:
    """PSNR in dB for unit-range images, MSE pooled over all channels; identical images give 99."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CLAMP / 10.0):
        return PSNR_CLAMP
    return -10.0 * math.log10(mse)


__all__ = ["PSNR_CLAMP", "psnr", "ssim"]
