"""Blur synthesis along a linear exposure trajectory, and photometric losses on blurry images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .camera import CameraIntrinsics
from .lie import PoseSE3, interpolate_pose, interpolation_jacobians, se3_exp, se3_log
from .scene import GaussianScene
from .splat import RenderGradients, RenderOutput, RenderSettings, render, render_backward

SAMPLINGS = ("inclusive", "open")


@dataclass(frozen=True)
class ExposureSegment:
    T_start: PoseSE3
    T_end: PoseSE3
    n: int = 10
    sampling: str = "inclusive"
    coupled: bool = True

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"virtual sample count must be an integer >= 1, got {self.n}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}")
        if not isinstance(self.T_start, PoseSE3) or not isinstance(self.T_end, PoseSE3):
            raise TypeError("segment endpoints must be PoseSE3")


@dataclass(frozen=True)
class BlurLossWeights:
    l1: float = 0.8
    ssim: float = 0.2

    def __post_init__(self):
        if self.l1 < 0 or self.ssim < 0:
            raise ValueError("loss weights must be non-negative")


def sample_times(n: int, sampling: str = "inclusive") -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.array([0.5])
    if sampling == "inclusive":
        return np.arange(n) / (n - 1)
    return (np.arange(n) + 0.5) / n


def virtual_poses(seg: ExposureSegment) -> list[PoseSE3]:
    return [interpolate_pose(seg.T_start, seg.T_end, float(u), seg.coupled) for u in sample_times(seg.n, seg.sampling)]


@dataclass
class BlurOutput:
    color: np.ndarray
    depth: np.ndarray
    poses: list[PoseSE3]
    renders: list[RenderOutput] = field(repr=False, default_factory=list)


def _is_static(seg: ExposureSegment) -> bool:
    a, b = seg.T_start, seg.T_end
    return np.array_equal(a.rotation.q, b.rotation.q) and np.array_equal(a.translation, b.translation)


def synthesize_blur(
    scene: GaussianScene,
    seg: ExposureSegment,
    intr: CameraIntrinsics,
    settings: RenderSettings | None = None,
    keep_renders: bool = False,
) -> BlurOutput:
    """Mean of the sharp renders at the segment's virtual poses."""
    poses = virtual_poses(seg)
    if _is_static(seg):
        # every sample is the same image; skip the sum so the result is exact
        o = render(scene, seg.T_start, intr, settings)
        return BlurOutput(o.color, o.depth, poses, [o] * len(poses) if keep_renders else [])
    color = np.zeros((intr.height, intr.width, 3))
    depth = np.zeros((intr.height, intr.width))
    outs = []
    # fixed summation order so the result does not depend on scheduling
    for p in poses:
        o = render(scene, p, intr, settings)
        color += o.color
        depth += o.depth
        if keep_renders:
            outs.append(o)
    return BlurOutput(color / len(poses), depth / len(poses), poses, outs)


def _decoupled_jacobians(seg: ExposureSegment, u: float, h: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    # no closed form is kept for the SO(3) x R^3 path; central differences are cheap here
    Tu = interpolate_pose(seg.T_start, seg.T_end, u, coupled=False)
    inv = Tu.inverse()
    Js, Je = np.zeros((6, 6)), np.zeros((6, 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        for J, which in ((Js, 0), (Je, 1)):
            ends = [[seg.T_start, seg.T_end], [seg.T_start, seg.T_end]]
            ends[0][which] = se3_exp(d) @ ends[0][which]
            ends[1][which] = se3_exp(-d) @ ends[1][which]
            p = interpolate_pose(*ends[0], u, coupled=False)
            m = interpolate_pose(*ends[1], u, coupled=False)
            J[:, i] = (se3_log(p @ inv) - se3_log(m @ inv)) / (2 * h)
    return Js, Je


def segment_jacobians(seg: ExposureSegment) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per virtual pose, d xi_u / d xi_start and d xi_u / d xi_end (left perturbations)."""
    us = sample_times(seg.n, seg.sampling)
    if seg.coupled:
        return [interpolation_jacobians(seg.T_start, seg.T_end, float(u)) for u in us]
    return [_decoupled_jacobians(seg, float(u)) for u in us]


@dataclass
class BlurGradients:
    scene: RenderGradients
    start: np.ndarray
    end: np.ndarray


def synthesize_blur_backward(
    scene: GaussianScene,
    seg: ExposureSegment,
    intr: CameraIntrinsics,
    grad_color: np.ndarray,
    grad_depth: np.ndarray | None = None,
    settings: RenderSettings | None = None,
    output: BlurOutput | None = None,
    depth_adjoints: list[np.ndarray] | None = None,
    alpha_adjoints: list[np.ndarray | None] | None = None,
) -> BlurGradients:
    """Backpropagate an adjoint on the blurred image to the scene and both endpoints.

    ``depth_adjoints`` (and ``alpha_adjoints``) optionally add one unscaled
    adjoint per virtual render, for losses defined on the individual sharp renders.
    """
    poses = output.poses if output is not None else virtual_poses(seg)
    renders = output.renders if output is not None and output.renders else [None] * len(poses)
    inv_n = 1.0 / len(poses)
    gc = np.asarray(grad_color, dtype=float) * inv_n
    gd = None if grad_depth is None else np.asarray(grad_depth, dtype=float) * inv_n
    total = RenderGradients.zeros(len(scene), scene.sh.shape[1])
    g_start, g_end = np.zeros(6), np.zeros(6)
    extra = depth_adjoints if depth_adjoints is not None else [None] * len(poses)
    extra_a = alpha_adjoints if alpha_adjoints is not None else [None] * len(poses)
    if len(extra) != len(poses) or len(extra_a) != len(poses):
        raise ValueError("need one depth/alpha adjoint per virtual render")
    for p, o, e, ea, (Js, Je) in zip(poses, renders, extra, extra_a, segment_jacobians(seg)):
        d = gd if e is None else (e if gd is None else gd + e)
        g = render_backward(scene, p, intr, gc, d, ea, settings=settings, output=o)
        total += g
        g_start += Js.T @ g.pose
        g_end += Je.T @ g.pose
    total.pose[:] = 0.0
    return BlurGradients(total, g_start, g_end)


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_WINDOW = gaussian_window()


def _blur(x: np.ndarray) -> np.ndarray:
    # separable, zero-padded, same-size; symmetric so it is its own adjoint
    y = correlate1d(x, _WINDOW, axis=0, mode="constant")
    return correlate1d(y, _WINDOW, axis=1, mode="constant")


def _as_hwc(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim == 2 else x


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    ma, mb = _blur(a), _blur(b)
    eaa, ebb, eab = _blur(a * a), _blur(b * b), _blur(a * b)
    n1 = 2 * ma * mb + SSIM_C1
    n2 = 2 * (eab - ma * mb) + SSIM_C2
    d1 = ma * ma + mb * mb + SSIM_C1
    d2 = (eaa - ma * ma) + (ebb - mb * mb) + SSIM_C2
    return ma, mb, n1, n2, d1, d2


def ssim(a, b) -> tuple[float, np.ndarray]:
    """Mean SSIM and the per-pixel map (averaged over channels)."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    _, _, n1, n2, d1, d2 = _ssim_terms(a, b)
    smap = (n1 * n2) / (d1 * d2)
    return float(smap.mean()), smap.mean(axis=2)


def ssim_grad(a, b) -> np.ndarray:
    """Gradient of mean SSIM(a, b) with respect to ``a``."""
    a, b = _as_hwc(a), _as_hwc(b)
    ma, mb, n1, n2, d1, d2 = _ssim_terms(a, b)
    S = (n1 * n2) / (d1 * d2)
    g = 1.0 / S.size
    dd = d1 * d2
    d_ma = (2 * mb * n2 - 2 * mb * n1) / dd - S * (2 * ma / d1 - 2 * ma / d2)
    d_eaa = -S / d2
    d_eab = 2 * n1 / dd
    return g * (_blur(d_ma) + 2 * a * _blur(d_eaa) + b * _blur(d_eab))


def blurry_loss(pred, target, w: BlurLossWeights | None = None) -> tuple[float, np.ndarray]:
    """``l1 * mean|pred - target| + ssim * (1 - SSIM)`` and its gradient w.r.t. ``pred``."""
    w = w or BlurLossWeights()
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = w.l1 * float(np.abs(diff).mean())
    adj = w.l1 * np.sign(diff) / diff.size
    if w.ssim > 0:
        s, _ = ssim(pred, target)
        loss += w.ssim * (1.0 - s)
        adj = adj - w.ssim * ssim_grad(pred, target).reshape(pred.shape)
    return loss, adj
