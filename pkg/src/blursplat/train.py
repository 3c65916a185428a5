"""Joint optimization of the scene and per-frame exposure segments."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .blur import (
    BlurLossWeights,
    ExposureSegment,
    blurry_loss,
    synthesize_blur,
    synthesize_blur_backward,
)
from .camera import CameraIntrinsics
from .explore import ExplorationConfig, ExplorationSkipped, ViewBuffer, explore
from .lie import PoseSE3, interpolate_pose, interpolation_jacobians, quat_multiply, se3_exp, so3_exp
from .imageio import write_pfm, write_png
from .metrics import psnr, ssim
from .priors.features import perceptual_loss
from .priors.providers import PriorProvider, ProviderError, deblur
from .scene import SH_C0, GaussianScene, save_scene
from .splat import RenderGradients, RenderSettings, render, render_backward

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "L_blurry", "L_pr", "L_geo", "L_reg", "heldout_psnr", "heldout_ssim")
GAUSSIAN_GROUPS = ("means", "log_scales", "rotations", "opacity_logits", "sh")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    total_iters: int = 7000
    warmup_iters: int = 1500
    gen_interval: int = 200
    n_virtual: int = 10
    sampling: str = "inclusive"
    lambda_1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_pr: float = 0.01
    lambda_geo: float = 0.01
    lambda_reg: float = 0.1
    depth_reg_target: str = "generated"  # or "virtual": regularize every virtual render instead
    depth_reg_mode: str = "coverage"  # or "raw": plain TV of the unnormalized composite depth
    pose_lr_start: float = 5e-3
    pose_lr_end: float = 5e-5
    lr_position: float = 1.6e-4  # multiplied by the scene extent
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    exploration_profile: str = "synthetic"
    s_min: float | None = None  # band overrides; None keeps the profile value
    s_max: float | None = None
    candidates_per_pair: int = 4
    extrapolation_margin: float = 0.1
    literal_score_sign: bool = False
    init_count: int = 300
    init_opacity: float = 0.1
    init_source: str = "points"  # "points" uses the dataset cloud when present, "random" ignores it
    pose_noise_rot_deg: float = 1.0
    pose_noise_trans_frac: float = 0.005
    init_motion_jitter: float = 1e-4
    prune_interval: int = 500
    prune_threshold: float = 0.005
    optimize_scene: bool = True
    optimize_poses: bool = True
    pose_coords: str = "split"  # or "endpoints": Adam directly on the start/end tangents
    pose_anchor: bool = True  # hold the first frame's midpoint to remove the gauge freedom
    pose_warmup: int = 0  # poses stay frozen for this many iterations while the scene settles
    eval_interval: int = 500
    log_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ConfigError("warmup_iters must lie in [0, total_iters]")
        if self.gen_interval < 1 or self.n_virtual < 1:
            raise ConfigError("gen_interval and n_virtual must be >= 1")
        for name in ("lambda_1", "lambda_ssim", "lambda_pr", "lambda_geo", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.pose_lr_start >= self.pose_lr_end > 0:
            raise ConfigError("need pose_lr_start >= pose_lr_end > 0")
        if self.depth_reg_target not in ("generated", "virtual"):
            raise ConfigError("depth_reg_target must be 'generated' or 'virtual'")
        if self.depth_reg_mode not in ("coverage", "raw"):
            raise ConfigError("depth_reg_mode must be 'coverage' or 'raw'")
        if self.init_source not in ("points", "random"):
            raise ConfigError("init_source must be 'points' or 'random'")
        if self.pose_coords not in ("split", "endpoints"):
            raise ConfigError("pose_coords must be 'split' or 'endpoints'")
        if self.pose_anchor and self.pose_coords != "split":
            raise ConfigError("pose_anchor needs pose_coords='split'")
        if self.sampling not in ("inclusive", "open"):
            raise ConfigError("sampling must be 'inclusive' or 'open'")
        self.exploration()  # validates the exploration fields

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def exploration(self) -> ExplorationConfig:
        try:
            c = ExplorationConfig.from_profile(
                self.exploration_profile,
                candidates_per_pair=self.candidates_per_pair,
                extrapolation_margin=self.extrapolation_margin,
                literal_sign=self.literal_score_sign,
            )
            if self.s_min is not None or self.s_max is not None:
                lo = c.s_min if self.s_min is None else self.s_min
                hi = c.s_max if self.s_max is None else self.s_max
                c = ExplorationConfig(lo, hi, c.candidates_per_pair, c.extrapolation_margin,
                                      literal_sign=c.literal_sign)
            return c
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def exploring(self) -> bool:
        return self.lambda_geo > 0 or self.lambda_reg > 0


def pose_lr(cfg: TrainConfig, it: int) -> float:
    """Exponential (log-linear) decay from pose_lr_start at iter 0 to pose_lr_end at total_iters."""
    t = min(max(it / cfg.total_iters, 0.0), 1.0)
    return math.exp((1 - t) * math.log(cfg.pose_lr_start) + t * math.log(cfg.pose_lr_end))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    intr: CameraIntrinsics
    train_ids: list[int]
    blurry: list[np.ndarray]
    init_poses: list[PoseSE3]  # midpoint estimates handed to the optimizer
    prior_poses: list[PoseSE3]  # pose metadata sent with deblur requests
    test_ids: list[int]
    test_images: list[np.ndarray]
    test_poses: list[PoseSE3]
    bounds: tuple[np.ndarray, np.ndarray]
    gt_segments: list[tuple[PoseSE3, PoseSE3]] | None = None
    meta: dict = field(default_factory=dict)
    # sparse point cloud (positions, RGB) for initialization; None means random fill
    init_points: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if not self.train_ids:
            raise ValueError("dataset needs at least one training view")
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("training and test views overlap")
        n = len(self.train_ids)
        if not (len(self.blurry) == len(self.init_poses) == len(self.prior_poses) == n):
            raise ValueError("per-frame training lists have inconsistent lengths")
        if not (len(self.test_images) == len(self.test_poses) == len(self.test_ids)):
            raise ValueError("per-frame test lists have inconsistent lengths")

    @property
    def extent(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def depth_reg_loss(depth: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean total variation (|dx| + |dy|, forward differences) normalized by pixel count."""
    D = np.asarray(depth, dtype=float)
    dx = D[:, 1:] - D[:, :-1]
    dy = D[1:, :] - D[:-1, :]
    n = D.size
    loss = float((np.abs(dx).sum() + np.abs(dy).sum()) / n)
    sx, sy = np.sign(dx) / n, np.sign(dy) / n
    adj = np.zeros_like(D)
    adj[:, 1:] += sx
    adj[:, :-1] -= sx
    adj[1:, :] += sy
    adj[:-1, :] -= sy
    return loss, adj


COVERAGE_EPS = 1e-6


def coverage_depth_reg_loss(depth: np.ndarray, alpha: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Total variation of the normalized depth D/A, each neighbour pair weighted by A_p * A_q.

    ``depth`` is the unnormalized composite sum(T a d) and ``alpha`` the accumulated
    opacity. Uncovered pixels drop out instead of reading as depth 0, and at full
    coverage this equals ``depth_reg_loss``. Returns the loss and its adjoints
    with respect to ``depth`` and ``alpha``.
    """
    D = np.asarray(depth, dtype=float)
    A = np.asarray(alpha, dtype=float)
    An = np.maximum(A, COVERAGE_EPS)
    Dn = D / An
    n = D.size
    loss = 0.0
    g_dn = np.zeros_like(D)
    g_a = np.zeros_like(D)
    for axis in (1, 0):
        lo = (slice(None), slice(None, -1)) if axis == 1 else (slice(None, -1), slice(None))
        hi = (slice(None), slice(1, None)) if axis == 1 else (slice(1, None), slice(None))
        d = Dn[hi] - Dn[lo]
        w = A[hi] * A[lo]
        loss += float((w * np.abs(d)).sum())
        sg = w * np.sign(d) / n
        g_dn[hi] += sg
        g_dn[lo] -= sg
        g_a[hi] += np.abs(d) * A[lo] / n
        g_a[lo] += np.abs(d) * A[hi] / n
    g_d = g_dn / An
    g_a -= np.where(A > COVERAGE_EPS, g_dn * D / An**2, 0.0)
    return loss / n, g_d, g_a


@dataclass
class LossWeights:
    lambda_pr: float = 0.01
    lambda_geo: float = 0.01
    lambda_reg: float = 0.1


def total_loss(components: dict, w: LossWeights, buffer_empty: bool = False) -> float:
    geo = 0.0 if buffer_empty else components.get("L_geo", 0.0)
    reg = 0.0 if buffer_empty else components.get("L_reg", 0.0)
    return components["L_blurry"] + w.lambda_pr * components.get("L_pr", 0.0) + w.lambda_geo * geo + w.lambda_reg * reg


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-15


def adam_direction(state: AdamState, grad: np.ndarray) -> np.ndarray | None:
    """Update moments and return the step direction, or None (state untouched) for non-finite input.

    Entries whose gradient is exactly zero get a zero step; their moments
    still decay. Unsampled frames and culled primitives therefore stay put.
    """
    if not np.all(np.isfinite(grad)):
        return None
    state.t += 1
    state.m *= BETA1
    state.m += (1 - BETA1) * grad
    state.v *= BETA2
    state.v += (1 - BETA2) * grad * grad
    mhat = state.m / (1 - BETA1**state.t)
    vhat = state.v / (1 - BETA2**state.t)
    step = mhat / (np.sqrt(vhat) + ADAM_EPS)
    step[grad == 0] = 0.0
    return step


def adam_step(params: np.ndarray, state: AdamState, grad: np.ndarray, lr: float) -> bool:
    """In-place Adam update for a vector-space parameter. Returns False when skipped."""
    step = adam_direction(state, grad)
    if step is None:
        return False
    params -= lr * step
    return True


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    scene: GaussianScene
    segments: list[ExposureSegment]
    adam: dict[str, AdamState]
    pose_adam: list[AdamState]
    buffer: ViewBuffer
    iteration: int = 0
    skipped_steps: int = 0
    metrics: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


def initial_scene(bounds, count: int, opacity: float, rng: np.random.Generator, sh_degree: int = 1,
                  points: tuple[np.ndarray, np.ndarray] | None = None) -> GaussianScene:
    """Isotropic primitives at ``points`` (positions, RGB) or, without them, uniform in the bounding box."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if points is not None and len(points[0]) > 0:
        means = np.asarray(points[0], dtype=float).copy()
        rgb = np.asarray(points[1], dtype=float)
        count = len(means)
    else:
        means = rng.uniform(lo, hi, (count, 3))
        rgb = np.full((count, 3), 0.5)
    k = min(4, count)
    if count > 1:
        d, _ = cKDTree(means).query(means, k=k)
        nn = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    else:
        nn = np.array([0.1 * np.linalg.norm(hi - lo)])
    log_scales = np.repeat(np.log(np.maximum(nn, 1e-4))[:, None], 3, axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    op = np.full(count, math.log(opacity / (1 - opacity)))
    ksh = 4 if sh_degree == 1 else 1
    sh = np.zeros((count, ksh, 3))
    sh[:, 0] = rgb / SH_C0
    return GaussianScene(means, log_scales, quats, op, sh, sh_degree=sh_degree)


def perturb_pose(T: PoseSE3, rot_deg: float, trans: float, rng: np.random.Generator) -> PoseSE3:
    """Perturb in the camera frame by a random tangent with |omega| <= rot_deg degrees and |nu| <= trans.

    A camera-frame perturbation rotates about the camera centre, so the
    translation error stays bounded by ``trans`` wherever the camera sits.
    """
    def ball(r):
        v = rng.normal(size=3)
        return v / np.linalg.norm(v) * r * rng.uniform() ** (1 / 3)

    return T @ se3_exp(np.r_[ball(math.radians(rot_deg)), ball(trans)])


def init_state(ds: Dataset, cfg: TrainConfig, rng: np.random.Generator, scene: GaussianScene | None = None) -> TrainState:
    if scene is None:
        pts = ds.init_points if cfg.init_source == "points" else None
        scene = initial_scene(ds.bounds, cfg.init_count, cfg.init_opacity, rng, points=pts)
    else:
        scene = scene.copy()
    segs = []
    for T in ds.init_poses:
        mid = perturb_pose(T, cfg.pose_noise_rot_deg, cfg.pose_noise_trans_frac * ds.extent, rng) \
            if (cfg.pose_noise_rot_deg > 0 or cfg.pose_noise_trans_frac > 0) else T
        # zero-motion start; a tiny symmetric split breaks the start/end exchange symmetry
        d = rng.normal(size=6)
        d *= cfg.init_motion_jitter / np.linalg.norm(d)
        segs.append(ExposureSegment(se3_exp(-d) @ mid, se3_exp(d) @ mid, cfg.n_virtual, cfg.sampling))
    adam = {g: AdamState(np.zeros_like(a), np.zeros_like(a)) for g, a in _gaussian_params(scene).items()}
    pose_adam = [AdamState(np.zeros(12), np.zeros(12)) for _ in segs]
    buf = ViewBuffer([interpolate_pose(s.T_start, s.T_end, 0.5) for s in segs])
    return TrainState(scene, segs, adam, pose_adam, buf)


def _gaussian_params(scene: GaussianScene) -> dict[str, np.ndarray]:
    # rotations are updated on the tangent, their Adam state is (N, 3)
    return {
        "means": scene.means,
        "log_scales": scene.log_scales,
        "rotations": np.zeros((len(scene), 3)),
        "opacity_logits": scene.opacity_logits,
        "sh": scene.sh,
    }


def _group_lrs(cfg: TrainConfig, extent: float) -> dict[str, float]:
    return {
        "means": cfg.lr_position * extent,
        "log_scales": cfg.lr_scale,
        "rotations": cfg.lr_rotation,
        "opacity_logits": cfg.lr_opacity,
        "sh": cfg.lr_sh,
    }


def apply_scene_step(state: TrainState, grads: RenderGradients, lrs: dict[str, float]) -> bool:
    g = grads.scene_arrays()
    if not all(np.all(np.isfinite(a)) for a in g.values()):
        return False
    sc = state.scene
    for name in GAUSSIAN_GROUPS:
        step = adam_direction(state.adam[name], g[name])
        if name == "rotations":
            sc.quats[:] = quat_multiply(sc.quats, so3_exp(-lrs[name] * step))
            sc.quats /= np.linalg.norm(sc.quats, axis=1, keepdims=True)
        else:
            getattr(sc, name)[...] -= lrs[name] * step
    return True


def apply_pose_step(state: TrainState, k: int, g_start: np.ndarray, g_end: np.ndarray, lr: float,
                    coords: str = "split", anchored: bool = False) -> bool:
    """Adam step on one frame's endpoint tangents.

    With ``coords="split"`` the moments live on the common (start+end)/2 and
    differential (end-start)/2 coordinates. This is a fixed linear change of
    variables of the same two endpoints; it gives the exposure length its own
    normalization, which matters because the blur loss is flat to first order
    in the split at zero motion. ``anchored`` drops the common-mode step,
    pinning the frame's midpoint to fix the global gauge.
    """
    if coords == "split":
        step = adam_direction(state.pose_adam[k], np.r_[g_start + g_end, g_end - g_start])
        if step is not None:
            common = 0.0 * step[:6] if anchored else step[:6]
            step = np.r_[common - step[6:], common + step[6:]]
    else:
        step = adam_direction(state.pose_adam[k], np.r_[g_start, g_end])
    if step is None:
        return False
    seg = state.segments[k]
    state.segments[k] = ExposureSegment(
        se3_exp(-lr * step[:6]) @ seg.T_start, se3_exp(-lr * step[6:]) @ seg.T_end, seg.n, seg.sampling, seg.coupled
    )
    return True


def prune(state: TrainState, threshold: float) -> int:
    keep = state.scene.opacities >= threshold
    removed = int((~keep).sum())
    if removed == 0 or keep.sum() == 0:
        return 0
    state.scene = state.scene.subset(keep)
    for a in state.adam.values():
        a.m, a.v = a.m[keep], a.v[keep]
    return removed


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate_views(scene: GaussianScene, poses, images, intr, settings: RenderSettings | None = None) -> list[dict]:
    rows = []
    for T, gt in zip(poses, images):
        img = render(scene, T, intr, settings).color
        rows.append({"psnr": psnr(img, gt), "ssim": ssim(img, gt)[0]})
    return rows


# --------------------------------------------------------------------------
# main loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    scene: GaussianScene
    segments: list[ExposureSegment]
    metrics: list[dict]
    buffer: ViewBuffer
    events: list[dict]
    final_eval: list[dict]

    @property
    def heldout_psnr(self) -> float:
        return float(np.mean([r["psnr"] for r in self.final_eval])) if self.final_eval else float("nan")

    @property
    def heldout_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.final_eval])) if self.final_eval else float("nan")


def _blurry_step(state, k, target, cfg, intr, settings, weights):
    seg = state.segments[k]
    out = synthesize_blur(state.scene, seg, intr, settings, keep_renders=True)
    loss, adj = blurry_loss(out.color, target, weights)
    depth_adjs = alpha_adjs = None
    reg = 0.0
    if cfg.depth_reg_target == "virtual" and cfg.lambda_reg > 0:
        depth_adjs, alpha_adjs = [], []
        for r in out.renders:
            l, a, aa = depth_reg_terms(r, cfg)
            reg += l / len(out.renders)
            depth_adjs.append(cfg.lambda_reg * a)
            alpha_adjs.append(None if aa is None else cfg.lambda_reg * aa)
    g = synthesize_blur_backward(state.scene, seg, intr, adj, settings=settings, output=out,
                                 depth_adjoints=depth_adjs, alpha_adjoints=alpha_adjs)
    return loss, reg, g


def _prior_step(state, k, target, cfg, intr, settings):
    seg = state.segments[k]
    mid = interpolate_pose(seg.T_start, seg.T_end, 0.5)
    out = render(state.scene, mid, intr, settings)
    loss, adj = perceptual_loss(out.color, target)
    g = render_backward(state.scene, mid, intr, cfg.lambda_pr * adj, settings=settings, output=out)
    Js, Je = interpolation_jacobians(seg.T_start, seg.T_end, 0.5)
    return loss, g, Js.T @ g.pose, Je.T @ g.pose


def depth_reg_terms(out, cfg) -> tuple[float, np.ndarray, np.ndarray | None]:
    if cfg.depth_reg_mode == "raw":
        loss, g = depth_reg_loss(out.depth)
        return loss, g, None
    return coverage_depth_reg_loss(out.depth, out.alpha)


def _generated_step(state, view, cfg, intr, settings):
    out = render(state.scene, view.pose, intr, settings)
    geo, adj = perceptual_loss(out.color, view.image)
    if cfg.depth_reg_target == "generated":
        reg, dadj, aadj = depth_reg_terms(out, cfg)
    else:
        reg, dadj, aadj = 0.0, np.zeros_like(out.depth), None
    g = render_backward(state.scene, view.pose, intr, cfg.lambda_geo * adj, cfg.lambda_reg * dadj,
                        None if aadj is None else cfg.lambda_reg * aadj, settings=settings, output=out)
    return geo, reg, g


def _exploration_round(state, ds, cfg, provider, targets, intr, settings, it):
    ecfg = cfg.exploration()
    n_train = len(state.segments)
    mids = [interpolate_pose(s.T_start, s.T_end, 0.5) for s in state.segments]
    state.buffer.poses[:n_train] = mids
    refs = list(zip(mids, targets))
    # every round proposes from the current training poses only; accepted views land in fixed slots
    round_buf = ViewBuffer(list(mids))
    try:
        res = explore(state.scene, provider, round_buf, refs, intr, ecfg, settings=settings)
    except (ExplorationSkipped, ProviderError) as e:
        log.warning("iter %d: exploration skipped: %s", it, e)
        state.events.append({"iter": it, "event": "exploration_skipped", "reason": str(e)})
        return
    for c in res.accepted:
        state.buffer.put(c)
    state.events.append({
        "iter": it,
        "event": "exploration",
        "baseline": res.baseline,
        "candidates": len(res.scored),
        "accepted": len(res.accepted),
        "buffer": len(state.buffer.generated),
        "trace": res.trace()["candidates"],
    })


def train(
    ds: Dataset,
    cfg: TrainConfig,
    provider: PriorProvider | None,
    out_dir: str | Path | None = None,
    scene: GaussianScene | None = None,
    settings: RenderSettings | None = None,
    callback: Callable[[TrainState], None] | None = None,
) -> TrainResult:
    settings = settings or RenderSettings()
    rng = np.random.default_rng(cfg.seed)
    intr = ds.intr
    state = init_state(ds, cfg, rng, scene)
    weights = BlurLossWeights(cfg.lambda_1, cfg.lambda_ssim)
    lrs = _group_lrs(cfg, ds.extent)
    targets: list[np.ndarray] = []
    if cfg.lambda_pr > 0 or (cfg.exploring and cfg.optimize_scene):
        if provider is None:
            raise ConfigError("this configuration needs a prior provider")
        # deblurred targets are fixed for the whole run; a failure here is fatal
        targets = [np.array(deblur(provider, b, p), copy=True) for b, p in zip(ds.blurry, ds.prior_poses)]
    writer = _MetricsWriter(out_dir, cfg) if out_dir is not None else None
    order: list[int] = []
    try:
        for it in range(1, cfg.total_iters + 1):
            state.iteration = it
            if (cfg.exploring and cfg.optimize_scene and it >= cfg.warmup_iters and it % cfg.gen_interval == 0):
                _exploration_round(state, ds, cfg, provider, targets, intr, settings, it)
            if not order:
                order = list(rng.permutation(len(ds.train_ids)))
            k = int(order.pop())
            L_b, L_reg, gb = _blurry_step(state, k, ds.blurry[k], cfg, intr, settings, weights)
            grads, g_start, g_end = gb.scene, gb.start, gb.end
            L_pr = L_geo = 0.0
            if cfg.lambda_pr > 0:
                L_pr, gp, ps, pe = _prior_step(state, k, targets[k], cfg, intr, settings)
                grads += gp
                g_start = g_start + ps
                g_end = g_end + pe
            if state.buffer.generated and cfg.exploring:
                view = state.buffer.generated[int(rng.integers(len(state.buffer.generated)))]
                L_geo, L_reg_gen, gg = _generated_step(state, view, cfg, intr, settings)
                if cfg.depth_reg_target == "generated":
                    L_reg = L_reg_gen
                grads += gg
            ok = True
            if cfg.optimize_scene:
                ok &= apply_scene_step(state, grads, lrs)
            if cfg.optimize_poses and it > cfg.pose_warmup:
                ok &= apply_pose_step(state, k, g_start, g_end, pose_lr(cfg, it), cfg.pose_coords,
                                      anchored=cfg.pose_anchor and k == 0)
            if not ok:
                state.skipped_steps += 1
                state.events.append({"iter": it, "event": "non_finite_gradient_skipped"})
            if cfg.optimize_scene and cfg.prune_interval and it % cfg.prune_interval == 0:
                n = prune(state, cfg.prune_threshold)
                if n:
                    state.events.append({"iter": it, "event": "prune", "removed": n})
            row = {"iter": it, "L_blurry": L_b, "L_pr": L_pr, "L_geo": L_geo, "L_reg": L_reg,
                   "heldout_psnr": None, "heldout_ssim": None}
            if ds.test_ids and (it % cfg.eval_interval == 0 or it == cfg.total_iters):
                ev = evaluate_views(state.scene, ds.test_poses, ds.test_images, intr, settings)
                row["heldout_psnr"] = float(np.mean([r["psnr"] for r in ev]))
                row["heldout_ssim"] = float(np.mean([r["ssim"] for r in ev]))
            state.metrics.append(row)
            if writer and (it % cfg.log_interval == 0 or row["heldout_psnr"] is not None or it == 1):
                writer.write(row)
            if callback:
                callback(state)
    finally:
        if writer:
            writer.close()
    final = evaluate_views(state.scene, ds.test_poses, ds.test_images, intr, settings) if ds.test_ids else []
    result = TrainResult(state.scene, state.segments, state.metrics, state.buffer, state.events, final)
    if out_dir is not None:
        write_run(out_dir, result, cfg, ds)
    return result


class _MetricsWriter:
    def __init__(self, out_dir, cfg: TrainConfig):
        p = Path(out_dir)
        p.mkdir(parents=True, exist_ok=True)
        self.f = open(p / "metrics.csv", "w", newline="")
        self.w = csv.writer(self.f, lineterminator="\n")
        self.w.writerow(METRIC_COLUMNS)

    def write(self, row: dict) -> None:
        self.w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])

    def close(self) -> None:
        self.f.close()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def write_run(out_dir, result: TrainResult, cfg: TrainConfig, ds: Dataset) -> None:
    p = Path(out_dir)
    p.mkdir(parents=True, exist_ok=True)
    save_scene(result.scene, p / "scene.json")
    poses = {
        "config_hash": cfg.digest(),
        "frames": [
            {"index": i, "start": s.T_start.to_json(), "end": s.T_end.to_json()}
            for i, s in zip(ds.train_ids, result.segments)
        ],
    }
    (p / "poses.json").write_text(json.dumps(poses, indent=1, sort_keys=True))
    (p / "config.json").write_text(json.dumps({**cfg.to_dict(), "config_hash": cfg.digest()}, indent=1, sort_keys=True))
    summary = {
        "config_hash": cfg.digest(),
        "heldout_psnr": result.heldout_psnr,
        "heldout_ssim": result.heldout_ssim,
        "per_view": [{"index": i, **r} for i, r in zip(ds.test_ids, result.final_eval)],
        "generated_views": len(result.buffer.generated),
        "gaussians": len(result.scene),
    }
    (p / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    rd = p / "renders"
    rd.mkdir(exist_ok=True)
    for i, T in zip(ds.test_ids, ds.test_poses):
        out = render(result.scene, T, ds.intr)
        write_png(rd / f"test_{i:04d}.png", out.color)
        write_pfm(rd / f"test_{i:04d}.pfm", out.color)
        write_pfm(rd / f"depth_{i:04d}.pfm", out.depth)
    with open(p / "events.jsonl", "w") as f:
        for e in result.events:
            f.write(json.dumps(e, sort_keys=True) + "\n")
