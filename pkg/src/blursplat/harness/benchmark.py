"""Synthetic sparse-view blurry benchmark: construction and on-disk layout."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..blur import ExposureSegment, synthesize_blur
from ..camera import CameraIntrinsics
from ..imageio import quantize16, read_png, write_png
from ..lie import PoseSE3, Rotation, se3_exp, so3_exp
from ..scene import GaussianScene, SceneRecipe, generate_scene
from ..splat import RenderSettings, render
from ..train import Dataset

TRAJECTORIES = ("arc", "shake", "dolly")
VIEW_SETS = {3: [5, 15, 25], 6: [2, 5, 10, 15, 17, 25], 9: [1, 2, 5, 10, 15, 17, 22, 25]}
HOLDOUT_EVERY = 7
OBSERVATION_SAMPLES = 200
DATASET_VERSION = 1
POINT_NOISE = 0.01  # triangulation jitter, fraction of the scene extent


class BenchmarkError(ValueError):
    pass


@dataclass
class BenchmarkSpec:
    recipe: SceneRecipe = field(default_factory=lambda: SceneRecipe(seed=1, count=300, layout="cluster-field"))
    trajectory: str = "arc"
    amplitude: float | list[float] = 0.15
    n_frames: int = 28
    views: dict[int, list[int]] = field(default_factory=lambda: {k: list(v) for k, v in VIEW_SETS.items()})
    width: int = 32
    height: int = 32
    fov_deg: float = 50.0
    radius: float = 2.5
    arc_deg: float = 120.0
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise BenchmarkError(f"trajectory must be one of {TRAJECTORIES}")
        if self.n_frames < 2:
            raise BenchmarkError("need at least two frames")
        amps = self.amplitudes()
        if len(amps) != self.n_frames or any(a < 0 or not math.isfinite(a) for a in amps):
            raise BenchmarkError("amplitude must be a non-negative scalar or one value per frame")
        test = set(self.test_indices())
        for k, idx in self.views.items():
            bad = [i for i in idx if not 0 <= i < self.n_frames]
            if bad:
                raise BenchmarkError(f"{k}-view indices out of range: {bad}")
            if test & set(idx):
                raise BenchmarkError(f"{k}-view indices overlap the held-out frames: {sorted(test & set(idx))}")

    def amplitudes(self) -> list[float]:
        if isinstance(self.amplitude, (int, float)):
            return [float(self.amplitude)] * self.n_frames
        return [float(a) for a in self.amplitude]

    def test_indices(self) -> list[int]:
        return list(range(0, self.n_frames, HOLDOUT_EVERY))

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["views"] = {str(k): v for k, v in self.views.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkSpec:
        d = dict(d)
        if "recipe" in d and isinstance(d["recipe"], dict):
            d["recipe"] = SceneRecipe(**d["recipe"])
        if "views" in d:
            d["views"] = {int(k): list(v) for k, v in d["views"].items()}
        try:
            return cls(**d)
        except TypeError as e:
            raise BenchmarkError(str(e)) from None

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def trajectory_poses(spec: BenchmarkSpec, center: np.ndarray) -> list[PoseSE3]:
    """Camera-to-world midpoint poses on a horizontal arc looking at ``center``."""
    half = math.radians(spec.arc_deg) / 2
    out = []
    for i in range(spec.n_frames):
        phi = -half + 2 * half * i / (spec.n_frames - 1)
        pos = center + spec.radius * np.array([math.sin(phi), 0.0, -math.cos(phi)])
        out.append(PoseSE3(Rotation(so3_exp(np.array([0.0, -phi, 0.0]))), pos))
    return out


def motion_direction(family: str, rng: np.random.Generator) -> np.ndarray:
    """Unit-scale tangent direction of the in-exposure motion, in the camera frame."""
    if family == "arc":
        return np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])  # sideways translation
    if family == "dolly":
        return np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0])  # along the optical axis
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    return np.r_[0.2 * w, 0.0, 0.0, 0.0]  # hand shake: rotation, 0.2 rad per unit amplitude


def exposure_segment(mid: PoseSE3, direction: np.ndarray, amplitude: float, n: int = OBSERVATION_SAMPLES) -> ExposureSegment:
    """Segment whose geodesic midpoint is exactly ``mid``; motion is applied in the camera frame."""
    eta = 0.5 * amplitude * np.asarray(direction, dtype=float)
    return ExposureSegment(mid @ se3_exp(-eta), mid @ se3_exp(eta), n)


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    scene: GaussianScene
    intr: CameraIntrinsics
    poses: list[PoseSE3]
    segments: list[tuple[PoseSE3, PoseSE3]]
    blurry: list[np.ndarray]
    sharp: list[np.ndarray]

    def dataset(self, k: int = 3, init_poses: list[PoseSE3] | None = None) -> Dataset:
        if k not in self.spec.views:
            raise BenchmarkError(f"no {k}-view selection in this benchmark")
        train = list(self.spec.views[k])
        test = self.spec.test_indices()
        lo, hi = self.scene.bbox()
        return Dataset(
            intr=self.intr,
            train_ids=train,
            blurry=[self.blurry[i] for i in train],
            init_poses=init_poses or [self.poses[i] for i in train],
            prior_poses=[self.poses[i] for i in train],
            test_ids=test,
            test_images=[self.sharp[i] for i in test],
            test_poses=[self.poses[i] for i in test],
            bounds=(lo, hi),
            gt_segments=[self.segments[i] for i in train],
            meta={"benchmark": self.spec.digest(), "views": k},
            init_points=self.sparse_points(train),
        )

    def sparse_points(self, frames: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """Stand-in for a structure-from-motion cloud over ``frames``.

        Keeps primitive centres that project inside at least two of the frames,
        jitters them, and colours each point with the mean blurry pixel at its
        projections. Occlusion is ignored.
        """
        rng = np.random.default_rng([self.spec.seed, *frames])
        means = self.scene.means
        hits = np.zeros(len(means), dtype=int)
        rgb = np.zeros((len(means), 3))
        for i in frames:
            T = self.poses[i]
            p = (means - T.translation) @ T.rotation.matrix()
            z = np.where(p[:, 2] > self.intr.near, p[:, 2], np.inf)
            u = np.rint(self.intr.fx * p[:, 0] / z + self.intr.cx).astype(int)
            v = np.rint(self.intr.fy * p[:, 1] / z + self.intr.cy).astype(int)
            ok = np.isfinite(z) & (u >= 0) & (u < self.intr.width) & (v >= 0) & (v < self.intr.height)
            hits += ok
            rgb[ok] += self.blurry[i][v[ok], u[ok]]
        keep = hits >= 2
        pts = means[keep] + rng.normal(0.0, POINT_NOISE * self.scene.extent(), (int(keep.sum()), 3))
        return pts, rgb[keep] / hits[keep, None]


def build_benchmark(spec: BenchmarkSpec, settings: RenderSettings | None = None) -> Benchmark:
    scene = generate_scene(spec.recipe)
    intr = spec.intrinsics()
    lo, hi = scene.bbox()
    poses = trajectory_poses(spec, 0.5 * (lo + hi))
    rng = np.random.default_rng(spec.seed)
    segs, blurry, sharp = [], [], []
    for T, a in zip(poses, spec.amplitudes()):
        seg = exposure_segment(T, motion_direction(spec.trajectory, rng), a)
        segs.append((seg.T_start, seg.T_end))
        # stored images are 16-bit, so keep the in-memory copy on the same grid
        blurry.append(quantize16(synthesize_blur(scene, seg, intr, settings).color))
        sharp.append(quantize16(render(scene, T, intr, settings).color))
    return Benchmark(spec, scene, intr, poses, segs, blurry, sharp)


# --------------------------------------------------------------------------
# directory layout
# --------------------------------------------------------------------------


def save_benchmark(b: Benchmark, root: str | Path) -> Path:
    from ..scene import save_scene

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    for i, (bl, sh) in enumerate(zip(b.blurry, b.sharp)):
        write_png(root / "images" / f"blur_{i:04d}.png", bl)
        write_png(root / "gt" / f"sharp_{i:04d}.png", sh)
    cams = {
        "version": DATASET_VERSION,
        "config_hash": b.spec.digest(),
        "intrinsics": b.intr.to_json(),
        "frames": [
            {"index": i, "pose": T.to_json(), "amplitude": a, "start": s.to_json(), "end": e.to_json()}
            for i, (T, a, (s, e)) in enumerate(zip(b.poses, b.spec.amplitudes(), b.segments))
        ],
    }
    (root / "cameras.json").write_text(json.dumps(cams, indent=1))
    split = {
        "config_hash": b.spec.digest(),
        "train": {str(k): v for k, v in b.spec.views.items()},
        "test": b.spec.test_indices(),
    }
    (root / "split.json").write_text(json.dumps(split, indent=1))
    (root / "benchmark.json").write_text(json.dumps({**b.spec.to_dict(), "config_hash": b.spec.digest()}, indent=1))
    save_scene(b.scene, root / "scene.json")
    return root


def load_benchmark(root: str | Path) -> Benchmark:
    from ..scene import load_scene

    root = Path(root)
    try:
        cams = json.loads((root / "cameras.json").read_text())
        split = json.loads((root / "split.json").read_text())
        spec_d = json.loads((root / "benchmark.json").read_text())
    except FileNotFoundError as e:
        raise BenchmarkError(f"incomplete dataset directory: {e.filename}") from None
    except json.JSONDecodeError as e:
        raise BenchmarkError(f"corrupt dataset metadata: {e}") from None
    spec_d.pop("config_hash", None)
    spec = BenchmarkSpec.from_dict(spec_d)
    if {int(k): v for k, v in split["train"].items()} != spec.views or split["test"] != spec.test_indices():
        raise BenchmarkError("split.json disagrees with benchmark.json")
    frames = sorted(cams["frames"], key=lambda f: f["index"])
    if len(frames) != spec.n_frames:
        raise BenchmarkError("cameras.json frame count disagrees with the spec")
    poses = [PoseSE3.from_json(f["pose"]) for f in frames]
    segs = [(PoseSE3.from_json(f["start"]), PoseSE3.from_json(f["end"])) for f in frames]
    blurry = [read_png(root / "images" / f"blur_{i:04d}.png") for i in range(spec.n_frames)]
    sharp = [read_png(root / "gt" / f"sharp_{i:04d}.png") for i in range(spec.n_frames)]
    intr = CameraIntrinsics.from_json(cams["intrinsics"])
    return Benchmark(spec, load_scene(root / "scene.json"), intr, poses, segs, blurry, sharp)
