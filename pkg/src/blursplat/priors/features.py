"""Deterministic multi-scale feature stack used by the perceptual losses.

Each level holds the RGB planes plus a smoothed gradient magnitude of the
luma. Levels are built by a sigma=1 Gaussian blur followed by stride-2
decimation. Every stage is written as an explicit op with a matching
adjoint so the perceptual loss can be backpropagated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_LEVELS = 3
MIN_SIZE = 16
LUMA = np.array([0.299, 0.587, 0.114])
GRAD_EPS = 1e-3
_GRAD_EPS_ROOT = float(np.sqrt(GRAD_EPS * GRAD_EPS))  # exact zero for flat regions
# fixed normalization constants (not per-image statistics)
CHANNEL_MEAN = np.array([0.5, 0.5, 0.5, 0.0])
CHANNEL_STD = np.array([0.25, 0.25, 0.25, 0.5])


def _gauss_kernel(sigma: float = 1.0) -> np.ndarray:
    r = int(np.ceil(3 * sigma))
    x = np.arange(-r, r + 1)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_BLUR = _gauss_kernel(1.0)
_SOBEL_D = np.array([-1.0, 0.0, 1.0])
_SOBEL_S = np.array([1.0, 2.0, 1.0])


def _corr(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    """Same-size correlation with edge (replicate) padding along ``axis``."""
    r = len(k) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="edge")
    n = x.shape[axis]
    out = np.zeros_like(x)
    for j, kj in enumerate(k):
        out += kj * np.take(xp, np.arange(j, j + n), axis=axis)
    return out


def _corr_T(y: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    n = y.shape[axis]
    shp = list(y.shape)
    shp[axis] = n + 2 * r
    xp = np.zeros(shp)
    xs = np.moveaxis(xp, axis, 0)
    ys = np.moveaxis(y, axis, 0)
    for j, kj in enumerate(k):
        xs[j:j + n] += kj * ys
    core = xs[r:r + n].copy()
    core[0] += xs[:r].sum(axis=0)
    core[-1] += xs[r + n:].sum(axis=0)
    return np.moveaxis(core, 0, axis)


def _blur2(x):
    return _corr(_corr(x, _BLUR, 0), _BLUR, 1)


def _blur2_T(y):
    return _corr_T(_corr_T(y, _BLUR, 1), _BLUR, 0)


@dataclass
class FeatureMap:
    """Per level an (H_l, W_l, 4) array; resolutions strictly decrease."""

    levels: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def size(self) -> int:
        return sum(lv.size for lv in self.levels)


@dataclass
class _Tape:
    rgb: list[np.ndarray]
    gx: list[np.ndarray]
    gy: list[np.ndarray]
    mag_denom: list[np.ndarray]
    shapes: list[tuple]


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def _forward(img: np.ndarray) -> tuple[FeatureMap, _Tape]:
    tape = _Tape([], [], [], [], [])
    levels = []
    x = img
    for lv in range(N_LEVELS):
        if lv > 0:
            tape.shapes.append(x.shape)
            x = _blur2(x)[::2, ::2]
        gray = x @ LUMA
        gx = _corr(_corr(gray, _SOBEL_D, 1), _SOBEL_S, 0)
        gy = _corr(_corr(gray, _SOBEL_D, 0), _SOBEL_S, 1)
        denom = np.sqrt(gx * gx + gy * gy + GRAD_EPS * GRAD_EPS)
        mag = denom - _GRAD_EPS_ROOT
        feat = (np.concatenate([x, mag[..., None]], axis=2) - CHANNEL_MEAN) / CHANNEL_STD
        levels.append(feat)
        tape.rgb.append(x)
        tape.gx.append(gx)
        tape.gy.append(gy)
        tape.mag_denom.append(denom)
    return FeatureMap(levels), tape


def extract_features(img) -> FeatureMap:
    return _forward(_check_image(img))[0]


def _backward(tape: _Tape, grads: list[np.ndarray]) -> np.ndarray:
    """Adjoint of the feature stack: per-level feature gradients to an image gradient."""
    carry = None
    for lv in reversed(range(N_LEVELS)):
        g = grads[lv] / CHANNEL_STD
        g_rgb = g[..., :3].copy()
        if carry is not None:
            g_rgb += carry
        g_mag = g[..., 3]
        denom = tape.mag_denom[lv]
        g_gx = g_mag * tape.gx[lv] / denom
        g_gy = g_mag * tape.gy[lv] / denom
        g_gray = _corr_T(_corr_T(g_gx, _SOBEL_S, 0), _SOBEL_D, 1) + _corr_T(_corr_T(g_gy, _SOBEL_S, 1), _SOBEL_D, 0)
        g_rgb += g_gray[..., None] * LUMA
        if lv > 0:
            shape = tape.shapes[lv - 1]
            up = np.zeros(shape)
            up[::2, ::2] = g_rgb
            carry = _blur2_T(up)
        else:
            carry = g_rgb
    return carry


def feature_distance(fa: FeatureMap, fb: FeatureMap) -> float:
    """Squared difference summed over every level, divided by the total element count."""
    if len(fa) != len(fb) or any(a.shape != b.shape for a, b in zip(fa.levels, fb.levels)):
        raise ValueError("feature maps have different shapes")
    n = sum(a.size for a in fa.levels)
    return float(sum(np.sum((a - b) ** 2) for a, b in zip(fa.levels, fb.levels)) / n)


def perceptual_loss(a, b_fixed) -> tuple[float, np.ndarray]:
    """Squared feature distance (see ``feature_distance``) and its gradient with respect to ``a`` only.

    ``b_fixed`` is a constant target; no gradient is produced for it.
    """
    a = _check_image(a)
    b = _check_image(b_fixed)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    fa, tape = _forward(a)
    fb, _ = _forward(b)
    diffs = [x - y for x, y in zip(fa.levels, fb.levels)]
    n = sum(d.size for d in diffs)
    loss = float(sum(np.sum(d * d) for d in diffs) / n)
    adj = _backward(tape, [2.0 * d / n for d in diffs])
    return loss, adj
