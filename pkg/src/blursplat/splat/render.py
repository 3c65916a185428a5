"""Forward splatting and its analytic backward pass.

Per frame: project every Gaussian (EWA, pinhole Jacobian), sort globally by
view depth (ties broken by scene index), bin into 16x16 tiles, then blend
each pixel front to back. The compositing kernel is the compiled
``_raster`` extension when importable, otherwise ``_raster_py``.

Tile culling uses the exact footprint where ``alpha >= alpha_min`` can occur
(radius ``sqrt(2 * lambda_max * ln(opacity / alpha_min))``), so binning never
changes a pixel value.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..camera import CameraIntrinsics
from ..lie import PoseSE3, quat_to_matrix
from ..scene import Gaussian, GaussianScene, covariances, sh_basis, sh_basis_grad
from . import _raster_py

try:
    if os.environ.get("BLURSPLAT_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from . import _raster as _raster_c
except ImportError:
    _raster_c = None

DEFAULT_BACKEND = "compiled" if _raster_c is not None else "python"


def available_backends() -> list[str]:
    return ["compiled", "python"] if _raster_c is not None else ["python"]


@dataclass
class RenderSettings:
    alpha_max: float = 0.999
    alpha_min: float = 1.0 / 255.0
    tile: int = 16
    cov_floor: float = 0.3
    clamp_color: bool = True
    pose_grad_through_jacobian: bool = True
    nthreads: int = 1
    backend: str | None = None

    def resolved_backend(self) -> str:
        b = self.backend or DEFAULT_BACKEND
        if b == "compiled" and _raster_c is None:
            raise RuntimeError("compiled rasterizer is not available")
        if b not in ("compiled", "python"):
            raise ValueError(f"unknown backend {b!r}")
        return b


@dataclass
class Projection:
    """Everything the backward pass needs from the forward projection."""

    R_cam: np.ndarray
    W: np.ndarray
    rel: np.ndarray
    p: np.ndarray
    valid: np.ndarray
    Sigma: np.ndarray
    Sigma_c: np.ndarray
    J: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    means2d: np.ndarray
    opac: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    raw_color: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    rects: np.ndarray
    order: np.ndarray
    n_degenerate: int
    tile_offsets: np.ndarray | None = None
    tile_gauss: np.ndarray | None = None


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    stats: dict = field(default_factory=dict)
    projection: Projection | None = field(default=None, repr=False)
    T_final: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RenderGradients:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    pose: np.ndarray

    @classmethod
    def zeros(cls, n: int, k: int) -> RenderGradients:
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, k, 3)), np.zeros(6))

    def __iadd__(self, other: RenderGradients) -> RenderGradients:
        self.means += other.means
        self.log_scales += other.log_scales
        self.rotations += other.rotations
        self.opacity_logits += other.opacity_logits
        self.sh += other.sh
        self.pose += other.pose
        return self

    def scaled(self, s: float) -> RenderGradients:
        return RenderGradients(
            self.means * s, self.log_scales * s, self.rotations * s, self.opacity_logits * s, self.sh * s, self.pose * s
        )

    def scene_arrays(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------


def project_scene(
    scene: GaussianScene, pose: PoseSE3, intr: CameraIntrinsics, settings: RenderSettings | None = None
) -> Projection:
    s = settings or RenderSettings()
    n = len(scene)
    R_cam = pose.rotation.matrix()
    W = R_cam.T
    rel = scene.means - pose.translation
    p = rel @ W.T
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    valid = (z > intr.near) & (z < intr.far)
    zs = np.where(valid, z, 1.0)

    Sigma = covariances(scene.quats, scene.log_scales)
    Sigma_c = W @ Sigma @ W.T
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * x / zs**2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * y / zs**2
    cov2d = J @ Sigma_c @ np.swapaxes(J, 1, 2) + s.cov_floor * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    degenerate = valid & ~(np.isfinite(det) & (det > 1e-12))
    valid &= ~degenerate
    det_s = np.where(valid, det, 1.0)
    conics = np.stack([c / det_s, -b / det_s, a / det_s], axis=1)
    means2d = np.stack([intr.fx * x / zs + intr.cx, intr.fy * y / zs + intr.cy], axis=1)

    opac = scene.opacities
    valid &= opac >= s.alpha_min
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    ratio = np.where(valid, opac / s.alpha_min, 1.0)
    radius = np.sqrt(2.0 * lam_max * np.log(np.maximum(ratio, 1.0)))
    x0 = np.maximum(0, np.ceil(means2d[:, 0] - radius)).astype(np.int64)
    x1 = np.minimum(intr.width, np.floor(means2d[:, 0] + radius) + 1).astype(np.int64)
    y0 = np.maximum(0, np.ceil(means2d[:, 1] - radius)).astype(np.int64)
    y1 = np.minimum(intr.height, np.floor(means2d[:, 1] + radius) + 1).astype(np.int64)
    finite = np.isfinite(means2d).all(axis=1) & np.isfinite(radius)
    valid &= finite
    x0, x1, y0, y1 = (np.where(valid, v, 0) for v in (x0, x1, y0, y1))
    valid &= (x0 < x1) & (y0 < y1)
    rects = np.stack([x0, x1, y0, y1], axis=1)

    dist = np.linalg.norm(rel, axis=1)
    dirs = rel / np.maximum(dist, 1e-12)[:, None]
    raw_color = np.einsum("nk,nkc->nc", sh_basis(dirs, scene.sh_degree), scene.sh)
    colors = np.clip(raw_color, 0.0, 1.0) if s.clamp_color else raw_color

    idx = np.nonzero(valid)[0]
    order = idx[np.argsort(z[idx], kind="stable")]
    return Projection(
        R_cam, W, rel, p, valid, Sigma, Sigma_c, J, cov2d, conics, means2d, opac, dirs, dist, raw_color, colors,
        z.copy(), rects, order, int(degenerate.sum()),
    )


def project(g: Gaussian, pose: PoseSE3, intr: CameraIntrinsics, settings: RenderSettings | None = None):
    """Single-primitive projection: ``(mean2d, cov2d, depth, valid)``.

    ``valid`` is False behind the near plane, beyond the far plane, or when
    the footprint misses the image entirely.
    """
    scene = GaussianScene.from_gaussians([g], sh_degree=1 if g.sh.shape[0] == 4 else 0)
    pr = project_scene(scene, pose, intr, settings)
    return pr.means2d[0], pr.cov2d[0], float(pr.p[0, 2]), bool(pr.valid[0])


def _bin_tiles(pr: Projection, intr: CameraIntrinsics, tile: int) -> None:
    tiles_x = (intr.width + tile - 1) // tile
    tiles_y = (intr.height + tile - 1) // tile
    order = pr.order
    r = pr.rects[order]
    tx0, tx1 = r[:, 0] // tile, (r[:, 1] - 1) // tile
    ty0, ty1 = r[:, 2] // tile, (r[:, 3] - 1) // tile
    wt = tx1 - tx0 + 1
    counts = wt * (ty1 - ty0 + 1)
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(order)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    tile_id = (ty0[rank] + local // wt[rank]) * tiles_x + tx0[rank] + local % wt[rank]
    perm = np.argsort(tile_id, kind="stable")
    pr.tile_gauss = np.ascontiguousarray(order[rank[perm]], dtype=np.int64)
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=offsets[1:])
    pr.tile_offsets = offsets


# --------------------------------------------------------------------------
# render / backward
# --------------------------------------------------------------------------


def render(
    scene: GaussianScene, pose: PoseSE3, intr: CameraIntrinsics, settings: RenderSettings | None = None
) -> RenderOutput:
    s = settings or RenderSettings()
    H, W = intr.height, intr.width
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    pr = project_scene(scene, pose, intr, s)
    backend = s.resolved_backend()
    if len(pr.order) == 0:
        color, depth, T = np.zeros((H, W, 3)), np.zeros((H, W)), np.ones((H, W))
    elif backend == "compiled":
        _bin_tiles(pr, intr, s.tile)
        color, depth, T = _raster_c.composite_forward(
            np.ascontiguousarray(pr.means2d), np.ascontiguousarray(pr.conics), np.ascontiguousarray(pr.opac),
            np.ascontiguousarray(pr.colors), np.ascontiguousarray(pr.depths), pr.tile_offsets, pr.tile_gauss,
            H, W, s.tile, s.alpha_max, s.alpha_min, s.nthreads,
        )
    else:
        color, depth, T = _raster_py.composite_forward(
            pr.means2d, pr.conics, pr.opac, pr.colors, pr.depths, pr.order, pr.rects, H, W, s.alpha_max, s.alpha_min
        )
    stats = {
        "n_visible": int(len(pr.order)),
        "n_culled": int(len(scene) - len(pr.order) - pr.n_degenerate),
        "n_degenerate": pr.n_degenerate,
        "backend": backend,
    }
    return RenderOutput(color, depth, 1.0 - T, stats, pr, T)


def render_backward(
    scene: GaussianScene,
    pose: PoseSE3,
    intr: CameraIntrinsics,
    grad_color: np.ndarray,
    grad_depth: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
    settings: RenderSettings | None = None,
    output: RenderOutput | None = None,
) -> RenderGradients:
    """Gradients of ``sum(grad_color * color) + sum(grad_depth * depth) + ...``.

    ``output`` may be the forward result for the same inputs, to skip
    re-projection. The pose gradient is w.r.t. a left perturbation
    ``exp(xi) @ pose``.
    """
    s = settings or RenderSettings()
    H, W = intr.height, intr.width
    grad_color = np.asarray(grad_color, dtype=float)
    if grad_color.shape != (H, W, 3):
        raise ValueError(f"grad_color must have shape {(H, W, 3)}")
    grad_depth = np.zeros((H, W)) if grad_depth is None else np.asarray(grad_depth, dtype=float)
    grad_alpha = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=float)
    if output is None or output.projection is None:
        output = render(scene, pose, intr, s)
    pr = output.projection
    n = len(scene)
    grads = RenderGradients.zeros(n, scene.sh.shape[1])
    if len(pr.order) == 0:
        return grads
    backend = s.resolved_backend()
    if backend == "compiled":
        if pr.tile_gauss is None:
            _bin_tiles(pr, intr, s.tile)
        per_entry = _raster_c.composite_backward(
            np.ascontiguousarray(pr.means2d), np.ascontiguousarray(pr.conics), np.ascontiguousarray(pr.opac),
            np.ascontiguousarray(pr.colors), np.ascontiguousarray(pr.depths), pr.tile_offsets, pr.tile_gauss,
            H, W, s.tile, s.alpha_max, s.alpha_min, np.ascontiguousarray(output.T_final),
            np.ascontiguousarray(grad_color), np.ascontiguousarray(grad_depth), np.ascontiguousarray(grad_alpha),
            s.nthreads,
        )
        # sequential, tile-ordered reduction keeps results thread-count independent
        g10 = np.stack([np.bincount(pr.tile_gauss, per_entry[:, c], minlength=n) for c in range(10)], axis=1)
    else:
        g10 = _raster_py.composite_backward(
            pr.means2d, pr.conics, pr.opac, pr.colors, pr.depths, pr.order, pr.rects, H, W, s.alpha_max,
            s.alpha_min, output.T_final, grad_color, grad_depth, grad_alpha,
        )
    return _backprop_projection(scene, pose, intr, pr, g10, s)


def _backprop_projection(scene, pose, intr, pr: Projection, g10: np.ndarray, s: RenderSettings) -> RenderGradients:
    v = pr.valid
    g10 = np.where(v[:, None], g10, 0.0)
    g_m, g_conic, g_op, g_col, g_depth = g10[:, 0:2], g10[:, 2:5], g10[:, 5], g10[:, 6:9], g10[:, 9]
    n = len(scene)
    fx, fy = intr.fx, intr.fy
    x, y = pr.p[:, 0], pr.p[:, 1]
    z = np.where(v, pr.p[:, 2], 1.0)

    # conic -> 2D covariance: dL/dSigma' = -K G_K K
    K = np.empty((n, 2, 2))
    K[:, 0, 0] = pr.conics[:, 0]
    K[:, 0, 1] = K[:, 1, 0] = pr.conics[:, 1]
    K[:, 1, 1] = pr.conics[:, 2]
    GK = np.empty((n, 2, 2))
    GK[:, 0, 0] = g_conic[:, 0]
    GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * g_conic[:, 1]
    GK[:, 1, 1] = g_conic[:, 2]
    G2 = -K @ GK @ K

    J, Sc = pr.J, pr.Sigma_c
    Jt = np.swapaxes(J, 1, 2)
    G_Sc = Jt @ G2 @ J
    G_J = 2.0 * G2 @ J @ Sc
    Wm = pr.W
    G_Sigma = Wm.T @ G_Sc @ Wm
    G_W = 2.0 * np.einsum("nij,jk,nkl->il", G_Sc, Wm, pr.Sigma)

    # Sigma = M M^T with M = R_g diag(scale)
    Rg = quat_to_matrix(scene.quats)
    scale = np.exp(scene.log_scales)
    M = Rg * scale[:, None, :]
    G_M = 2.0 * G_Sigma @ M
    g_scale = np.einsum("nrk,nrk->nk", G_M, Rg)
    g_logscale = g_scale * scale
    A = np.swapaxes(Rg, 1, 2) @ (G_M * scale[:, None, :])
    g_rot = np.stack([A[:, 2, 1] - A[:, 1, 2], A[:, 0, 2] - A[:, 2, 0], A[:, 1, 0] - A[:, 0, 1]], axis=1)

    # camera-space position
    gp = np.zeros((n, 3))
    gp[:, 0] = g_m[:, 0] * fx / z
    gp[:, 1] = g_m[:, 1] * fy / z
    gp[:, 2] = -g_m[:, 0] * fx * x / z**2 - g_m[:, 1] * fy * y / z**2 + g_depth
    gpJ = np.zeros((n, 3))
    gpJ[:, 0] = G_J[:, 0, 2] * (-fx / z**2)
    gpJ[:, 1] = G_J[:, 1, 2] * (-fy / z**2)
    gpJ[:, 2] = (
        G_J[:, 0, 0] * (-fx / z**2)
        + G_J[:, 0, 2] * (2 * fx * x / z**3)
        + G_J[:, 1, 1] * (-fy / z**2)
        + G_J[:, 1, 2] * (2 * fy * y / z**3)
    )
    gp_total = gp + gpJ

    # color: clamp mask, SH coefficients, view direction
    if s.clamp_color:
        g_raw = np.where((pr.raw_color > 0.0) & (pr.raw_color < 1.0), g_col, 0.0)
    else:
        g_raw = g_col
    basis = sh_basis(pr.dirs, scene.sh_degree)
    g_sh = basis[:, :, None] * g_raw[:, None, :]
    g_dir = np.einsum("nc,nkc,kd->nd", g_raw, scene.sh, sh_basis_grad(scene.sh_degree))
    g_rel = (g_dir - pr.dirs * np.sum(pr.dirs * g_dir, axis=1, keepdims=True)) / np.maximum(pr.dist, 1e-12)[:, None]

    g_means = gp_total @ Wm + g_rel
    op = pr.opac
    g_logit = g_op * op * (1.0 - op)

    # pose, left perturbation (omega, nu)
    gp_pose = gp_total if s.pose_grad_through_jacobian else gp
    gw = gp_pose @ Wm  # W^T gp, per Gaussian, world frame
    g_omega = np.cross(gw, scene.means).sum(axis=0)
    g_nu = -gw.sum(axis=0)
    B = Wm.T @ G_W
    g_omega -= np.array([B[2, 1] - B[1, 2], B[0, 2] - B[2, 0], B[1, 0] - B[0, 1]])
    g_omega += np.cross(g_rel, pose.translation).sum(axis=0)
    g_nu -= g_rel.sum(axis=0)

    mask = v.astype(float)
    return RenderGradients(
        g_means * mask[:, None],
        g_logscale * mask[:, None],
        g_rot * mask[:, None],
        g_logit * mask,
        g_sh * mask[:, None, None],
        np.concatenate([g_omega, g_nu]),
    )
