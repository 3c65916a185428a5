"""Gaussian primitives, spherical-harmonic color, synthetic scenes, scene.json I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lie import Rotation, quat_to_matrix
from .rng import Xoshiro256

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SCENE_FORMAT_VERSION = 1
LAYOUTS = ("box", "textured-wall", "cluster-field")
COLOR_SCHEMES = ("vivid", "mono")


class SceneFormatError(ValueError):
    """scene.json failed validation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnsupportedVersionError(SceneFormatError):
    pass


def sh_coeff_count(degree: int) -> int:
    if degree not in (0, 1):
        raise ValueError(f"SH degree must be 0 or 1, got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape ``(..., K)``."""
    dirs = np.asarray(dirs, dtype=float)
    c0 = np.full(dirs.shape[:-1] + (1,), SH_C0)
    if degree == 0:
        return c0
    x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
    return np.concatenate([c0, -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1)


def sh_basis_grad(degree: int) -> np.ndarray:
    """d(basis)/d(dir), shape ``(K, 3)``; constant because degree <= 1."""
    if degree == 0:
        return np.zeros((1, 3))
    return np.array(
        [[0.0, 0.0, 0.0], [0.0, -SH_C1, 0.0], [0.0, 0.0, SH_C1], [-SH_C1, 0.0, 0.0]]
    )


def sh_eval(sh: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Evaluate SH color for one primitive. ``sh`` has shape ``(K, 3)``.

    No clamping here; the rasterizer clamps to [0, 1] when compositing.
    """
    sh = np.asarray(sh, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("direction must be a unit vector")
    degree = {1: 0, 4: 1}.get(sh.shape[0])
    if degree is None:
        raise ValueError(f"unsupported SH coefficient count {sh.shape[0]}")
    return sh_basis(direction, degree) @ sh


@dataclass
class Gaussian:
    mu: np.ndarray
    log_scale: np.ndarray
    rotation: Rotation
    opacity_logit: float
    sh: np.ndarray

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


def covariance(g: Gaussian) -> np.ndarray:
    M = g.rotation.matrix() * np.exp(g.log_scale)[None, :]
    return M @ M.T


def covariances(quats: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    M = quat_to_matrix(quats) * np.exp(log_scales)[:, None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianScene:
    """Struct-of-arrays scene. ``sh`` has shape ``(N, K, 3)``, K = 1 or 4."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        q = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.quats = q / np.linalg.norm(q, axis=1, keepdims=True)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        self.sh = np.asarray(self.sh, dtype=float).reshape(n, sh_coeff_count(self.sh_degree), 3)

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.means[i].copy(),
            self.log_scales[i].copy(),
            Rotation(self.quats[i]),
            float(self.opacity_logits[i]),
            self.sh[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gs: list[Gaussian], sh_degree: int = 1) -> GaussianScene:
        return cls(
            np.array([g.mu for g in gs]),
            np.array([g.log_scale for g in gs]),
            np.array([g.rotation.q for g in gs]),
            np.array([g.opacity_logit for g in gs]),
            np.array([g.sh for g in gs]),
            sh_degree=sh_degree,
        )

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.means.min(axis=0), self.means.max(axis=0)

    def extent(self) -> float:
        """Diagonal length of the bounding box (1.0 for a single point)."""
        lo, hi = self.bbox()
        d = float(np.linalg.norm(hi - lo))
        return d if d > 0 else 1.0

    def copy(self) -> GaussianScene:
        return GaussianScene(
            self.means.copy(),
            self.log_scales.copy(),
            self.quats.copy(),
            self.opacity_logits.copy(),
            self.sh.copy(),
            sh_degree=self.sh_degree,
            meta=dict(self.meta),
        )

    def subset(self, keep: np.ndarray) -> GaussianScene:
        return GaussianScene(
            self.means[keep],
            self.log_scales[keep],
            self.quats[keep],
            self.opacity_logits[keep],
            self.sh[keep],
            sh_degree=self.sh_degree,
            meta=dict(self.meta),
        )


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    count: int = 200
    layout: str = "textured-wall"
    color_scheme: str = "vivid"
    sh_degree: int = 1


_VIVID = np.array(
    [
        [0.85, 0.20, 0.15],
        [0.15, 0.55, 0.85],
        [0.90, 0.80, 0.20],
        [0.15, 0.70, 0.30],
        [0.80, 0.80, 0.80],
        [0.12, 0.12, 0.15],
        [0.60, 0.25, 0.70],
        [0.95, 0.55, 0.15],
    ]
)


def _random_quat(r: Xoshiro256) -> np.ndarray:
    q = np.array([r.normal() for _ in range(4)])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def _quat_about_z(angle: float) -> np.ndarray:
    return np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)])


def _color(r: Xoshiro256, scheme: str) -> np.ndarray:
    if scheme == "mono":
        v = r.uniform(0.1, 0.9)
        return np.array([v, v, v])
    base = _VIVID[r.randint(len(_VIVID))]
    return np.clip(base + np.array([r.normal(0, 0.04) for _ in range(3)]), 0.05, 0.95)


def _sh_from_color(r: Xoshiro256, rgb: np.ndarray, degree: int) -> np.ndarray:
    sh = np.zeros((sh_coeff_count(degree), 3))
    sh[0] = rgb / SH_C0
    if degree == 1:
        for k in range(1, 4):
            sh[k] = [r.normal(0.0, 0.03) for _ in range(3)]
    return sh


def generate_scene(recipe: SceneRecipe) -> GaussianScene:
    """Deterministic synthetic scene.

    Layouts:

    * ``box``: primitives uniform in [-1, 1]^3 (a single primitive sits at
      the origin).
    * ``textured-wall``: thin anisotropic primitives tiling the z = 0 plane,
      x, y in [-1, 1]. Cameras should look down +z from z < 0.
    * ``cluster-field``: a textured wall backdrop (40 %) plus blob clusters
      at depths z in [-0.9, -0.2] in front of it.
    """
    if recipe.count < 1:
        raise ValueError("primitive count must be >= 1")
    if recipe.layout not in LAYOUTS:
        raise ValueError(f"unknown layout {recipe.layout!r}")
    if recipe.color_scheme not in COLOR_SCHEMES:
        raise ValueError(f"unknown color scheme {recipe.color_scheme!r}")
    r = Xoshiro256(recipe.seed)
    n = recipe.count
    means, scales, quats, logits, shs = [], [], [], [], []

    def add(mu, scale, q, opacity):
        means.append(np.asarray(mu, dtype=float))
        scales.append(np.log(np.asarray(scale, dtype=float)))
        quats.append(q)
        logits.append(math.log(opacity / (1.0 - opacity)))
        shs.append(_sh_from_color(r, _color(r, recipe.color_scheme), recipe.sh_degree))

    def wall(k):
        for _ in range(k):
            mu = [r.uniform(-1.0, 1.0), r.uniform(-1.0, 1.0), r.normal(0.0, 0.01)]
            long_axis = r.uniform(0.05, 0.16)
            short_axis = r.uniform(0.015, 0.045)
            add(mu, [long_axis, short_axis, 0.01], _quat_about_z(r.uniform(0.0, math.pi)), r.uniform(0.75, 0.97))

    if recipe.layout == "box":
        if n == 1:
            add([0.0, 0.0, 0.0], [0.2, 0.2, 0.2], np.array([1.0, 0.0, 0.0, 0.0]), 0.9)
        else:
            for _ in range(n):
                mu = [r.uniform(-1, 1) for _ in range(3)]
                s = [math.exp(r.uniform(math.log(0.03), math.log(0.15))) for _ in range(3)]
                add(mu, s, _random_quat(r), r.uniform(0.6, 0.95))
    elif recipe.layout == "textured-wall":
        wall(n)
    else:
        n_wall = max(1, int(round(0.4 * n)))
        wall(n_wall)
        remaining = n - n_wall
        n_clusters = max(1, remaining // 12)
        centers = [
            np.array([r.uniform(-0.7, 0.7), r.uniform(-0.7, 0.7), r.uniform(-0.9, -0.2)]) for _ in range(n_clusters)
        ]
        for i in range(remaining):
            c = centers[i % n_clusters]
            mu = c + np.array([r.normal(0, 0.12) for _ in range(3)])
            s = [math.exp(r.uniform(math.log(0.025), math.log(0.08))) for _ in range(3)]
            add(mu, s, _random_quat(r), r.uniform(0.7, 0.95))

    scene = GaussianScene(
        np.array(means), np.array(scales), np.array(quats), np.array(logits), np.array(shs), sh_degree=recipe.sh_degree
    )
    scene.meta["recipe"] = {
        "seed": recipe.seed,
        "count": recipe.count,
        "layout": recipe.layout,
        "color_scheme": recipe.color_scheme,
        "sh_degree": recipe.sh_degree,
    }
    return scene


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def scene_to_dict(scene: GaussianScene) -> dict:
    lo, hi = scene.bbox()
    gaussians = []
    for i in range(len(scene)):
        q = scene.quats[i]
        if q[0] < 0:
            q = -q
        gaussians.append(
            {
                "mu": [float(v) for v in scene.means[i]],
                "log_scale": [float(v) for v in scene.log_scales[i]],
                "q": [float(v) for v in q],
                "opacity_logit": float(scene.opacity_logits[i]),
                "sh": [[float(v) for v in row] for row in scene.sh[i]],
            }
        )
    out = {
        "version": SCENE_FORMAT_VERSION,
        "sh_degree": scene.sh_degree,
        "bbox": {"min": [float(v) for v in lo], "max": [float(v) for v in hi]},
        "gaussians": gaussians,
    }
    if scene.meta:
        out["meta"] = scene.meta
    return out


def dumps_scene(scene: GaussianScene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"), sort_keys=True)


def save_scene(scene: GaussianScene, path) -> None:
    Path(path).write_text(dumps_scene(scene))


def _number(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneFormatError(path, f"expected number, got {type(v).__name__}")
    if not math.isfinite(v):
        raise SceneFormatError(path, "non-finite number")
    return float(v)


def _vector(v, n: int, path: str) -> list[float]:
    if not isinstance(v, list) or len(v) != n:
        raise SceneFormatError(path, f"expected list of {n} numbers")
    return [_number(x, f"{path}[{i}]") for i, x in enumerate(v)]


def scene_from_dict(d) -> GaussianScene:
    if not isinstance(d, dict):
        raise SceneFormatError("$", "expected object")
    if "version" not in d:
        raise SceneFormatError("version", "missing")
    if d["version"] != SCENE_FORMAT_VERSION:
        raise UnsupportedVersionError("version", f"unsupported scene version {d['version']!r}")
    degree = d.get("sh_degree")
    if degree not in (0, 1):
        raise SceneFormatError("sh_degree", "must be 0 or 1")
    k = sh_coeff_count(degree)
    gs = d.get("gaussians")
    if not isinstance(gs, list) or not gs:
        raise SceneFormatError("gaussians", "expected non-empty list")
    means, scales, quats, logits, shs = [], [], [], [], []
    for i, g in enumerate(gs):
        p = f"gaussians[{i}]"
        if not isinstance(g, dict):
            raise SceneFormatError(p, "expected object")
        for key in ("mu", "log_scale", "q", "opacity_logit", "sh"):
            if key not in g:
                raise SceneFormatError(f"{p}.{key}", "missing")
        means.append(_vector(g["mu"], 3, f"{p}.mu"))
        scales.append(_vector(g["log_scale"], 3, f"{p}.log_scale"))
        q = _vector(g["q"], 4, f"{p}.q")
        if abs(math.sqrt(sum(x * x for x in q)) - 1.0) > 1e-6:
            raise SceneFormatError(f"{p}.q", "quaternion is not unit length")
        quats.append(q)
        logits.append(_number(g["opacity_logit"], f"{p}.opacity_logit"))
        sh = g["sh"]
        if not isinstance(sh, list) or len(sh) != k:
            raise SceneFormatError(f"{p}.sh", f"expected {k} coefficient rows")
        shs.append([_vector(row, 3, f"{p}.sh[{j}]") for j, row in enumerate(sh)])
    scene = GaussianScene(np.array(means), np.array(scales), np.array(quats), np.array(logits), np.array(shs), degree)
    # keep the exact stored quaternion bits rather than renormalizing
    scene.quats = np.array(quats)
    if "meta" in d:
        scene.meta = d["meta"]
    return scene


def loads_scene(text: str) -> GaussianScene:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError("$", f"invalid JSON: {exc}") from exc
    return scene_from_dict(d)


def load_scene(path) -> GaussianScene:
    return loads_scene(Path(path).read_text())
