"""Radially averaged power spectra for judging how much fine detail a render keeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SpectrumProfile:
    log_magnitude: np.ndarray
    radial_power: np.ndarray
    hf_ratio: float

    def to_json(self) -> dict:
        return {"radial_power": [float(v) for v in self.radial_power], "hf_ratio": self.hf_ratio}


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img @ LUMA if img.ndim == 3 else img


def radial_spectrum(img: np.ndarray) -> SpectrumProfile:
    """Centered spectrum, 1-pixel-frequency radial profile and high-frequency ratio.

    The mean is removed before the Hann window and restored in the DC bin,
    so a constant image puts all of its energy at DC.

    ``hf_ratio`` is the share of non-DC spectral magnitude at radii above
    half the Nyquist radius. Magnitude rather than power: under power
    weighting the 1/f^2 falloff of rendered scenes pins the ratio near zero
    and it stops discriminating sharp from blurred frames.
    """
    g = to_gray(img)
    H, W = g.shape
    mean = g.mean()
    window = np.outer(np.hanning(H), np.hanning(W))
    F = np.fft.fft2((g - mean) * window)
    F[0, 0] += mean * H * W
    F = np.fft.fftshift(F)
    power = np.abs(F) ** 2
    ky = np.arange(H) - H // 2
    kx = np.arange(W) - W // 2
    r = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    nyquist = min(H, W) // 2
    bins = np.rint(r).astype(int)
    inside = bins <= nyquist
    sums = np.bincount(bins[inside], weights=power[inside], minlength=nyquist + 1)
    counts = np.bincount(bins[inside], minlength=nyquist + 1)
    radial = sums / np.maximum(counts, 1)
    mag = np.abs(F)
    ac = r > 0
    total = mag[ac].sum()
    hf = float(mag[r > nyquist / 2].sum() / total) if total > 1e-12 * max(mag.max(), 1.0) else 0.0
    return SpectrumProfile(np.log1p(np.abs(F)), radial, hf)
