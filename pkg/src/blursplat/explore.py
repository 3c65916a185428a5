"""Consistency-guided exploration of novel camera poses.

Candidate poses are interpolated (and lightly extrapolated) between
adjacent poses of the view buffer. Each candidate is rendered, repaired by
the prior provider, and scored by the PSNR between the repaired image and
the render. The score is normalized by the same quantity averaged over the
training views, and candidates inside the ``[s_min, s_max]`` band are kept.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import CameraIntrinsics
from .lie import PoseSE3, interpolate_pose, pose_distance
from .metrics import psnr
from .priors.providers import PriorProvider, ProviderError, RepairRequest, nearest_reference, repair
from .scene import GaussianScene
from .splat import RenderSettings, render

log = logging.getLogger(__name__)

PROFILES = {"synthetic": (8.5, 2.5), "outdoor": (14.5, 4.5)}  # (s_max, s_min)
DEDUP_TOL = 1e-6


class ExplorationSkipped(RuntimeError):
    """The baseline could not be computed; the caller should carry on without exploring."""


@dataclass
class ExplorationConfig:
    s_min: float = 2.5
    s_max: float = 8.5
    candidates_per_pair: int = 4
    extrapolation_margin: float = 0.1
    evaluator: str = "psnr"
    literal_sign: bool = False  # True: s_tilde = s - baseline
    t0: int = 199
    workers: int = 1

    def __post_init__(self):
        if self.s_min > self.s_max:
            raise ValueError(f"s_min ({self.s_min}) must not exceed s_max ({self.s_max})")
        if int(self.candidates_per_pair) != self.candidates_per_pair or self.candidates_per_pair < 1:
            raise ValueError("candidates_per_pair must be an integer >= 1")
        if not 0.0 <= self.extrapolation_margin <= 0.2:
            raise ValueError("extrapolation_margin must lie in [0, 0.2]")
        if self.evaluator != "psnr":
            raise ValueError(f"unsupported evaluator {self.evaluator!r}")

    @classmethod
    def from_profile(cls, name: str, **kw) -> ExplorationConfig:
        if name not in PROFILES:
            raise ValueError(f"unknown exploration profile {name!r}; choose from {sorted(PROFILES)}")
        s_max, s_min = PROFILES[name]
        return cls(s_min=s_min, s_max=s_max, **kw)

    def accepts(self, s_tilde: float) -> bool:
        return bool(math.isfinite(s_tilde) and self.s_min <= s_tilde <= self.s_max)

    def normalize(self, s: float, baseline: float) -> float:
        return s - baseline if self.literal_sign else baseline - s


@dataclass
class ScoredCandidate:
    pose: PoseSE3
    rendered: np.ndarray | None
    fixed: np.ndarray | None
    s: float
    s_tilde: float
    accepted: bool
    reference: int | None = None
    error: str | None = None
    slot: tuple[int, int] | None = None

    def trace(self) -> dict:
        return {
            "pose": self.pose.to_json(),
            "s": None if not math.isfinite(self.s) else self.s,
            "s_tilde": None if not math.isfinite(self.s_tilde) else self.s_tilde,
            "accepted": self.accepted,
            "reference": self.reference,
            "slot": None if self.slot is None else list(self.slot),
            **({"error": self.error} if self.error else {}),
        }


@dataclass
class GeneratedView:
    pose: PoseSE3
    image: np.ndarray
    weight: float = 1.0
    score: float = float("nan")


@dataclass
class ViewBuffer:
    """Poses in insertion order (training first) plus the generated views kept for training."""

    poses: list[PoseSE3]
    generated: list[GeneratedView] = field(default_factory=list)

    slots: dict = field(default_factory=dict)

    def add(self, cand: ScoredCandidate) -> None:
        # the buffered target is a frozen private copy: nothing flows back into the provider's output
        img = np.array(cand.fixed, dtype=float, copy=True)
        img.flags.writeable = False
        self.poses.append(cand.pose)
        self.generated.append(GeneratedView(cand.pose, img, 1.0, cand.s_tilde))

    def put(self, cand: ScoredCandidate) -> None:
        """Keep one generated view per slot: a re-accepted slot refreshes its pose and target in place."""
        j = self.slots.get(cand.slot)
        if j is None:
            self.slots[cand.slot] = len(self.generated)
            self.add(cand)
            return
        img = np.array(cand.fixed, dtype=float, copy=True)
        img.flags.writeable = False
        self.generated[j] = GeneratedView(cand.pose, img, 1.0, cand.s_tilde)
        self.poses[len(self.poses) - len(self.generated) + j] = cand.pose


class _SeenPoses:
    """Pose set with exact deduplication; translation distance lower-bounds the pose distance."""

    def __init__(self, poses: list[PoseSE3]):
        self.poses = list(poses)
        self.t = np.array([p.translation for p in poses]).reshape(-1, 3)

    def is_new(self, p: PoseSE3) -> bool:
        near = np.nonzero(np.linalg.norm(self.t - p.translation, axis=1) < DEDUP_TOL)[0]
        return all(pose_distance(p, self.poses[i]) >= DEDUP_TOL for i in near)

    def add(self, p: PoseSE3) -> None:
        self.poses.append(p)
        self.t = np.vstack([self.t, p.translation])


def candidate_slots(poses: list[PoseSE3], cfg: ExplorationConfig, existing: list[PoseSE3] | None = None) -> list[tuple[PoseSE3, tuple[int, int]]]:
    """Deduplicated candidates tagged with their slot ``(pair index, sample index)``."""
    if len(poses) < 2:
        return []
    c, m = cfg.candidates_per_pair, cfg.extrapolation_margin
    us = [k / (c + 1) for k in range(1, c + 1)] + [-m, 1.0 + m]
    seen = _SeenPoses(existing if existing is not None else poses)
    out = []
    for i, (a, b) in enumerate(zip(poses[:-1], poses[1:])):
        for k, u in enumerate(us):
            p = interpolate_pose(a, b, u)
            if seen.is_new(p):
                out.append((p, (i, k)))
                seen.add(p)
    return out


def generate_candidates(poses: list[PoseSE3], cfg: ExplorationConfig, existing: list[PoseSE3] | None = None) -> list[PoseSE3]:
    """Interpolants and extrapolants for each adjacent pair, deduplicated."""
    return [p for p, _ in candidate_slots(poses, cfg, existing)]


def consistency(rendered: np.ndarray, fixed: np.ndarray) -> float:
    return psnr(fixed, rendered)


def baseline_score(
    scene: GaussianScene,
    provider: PriorProvider,
    poses: list[PoseSE3],
    references: list[np.ndarray],
    intr: CameraIntrinsics,
    cfg: ExplorationConfig | None = None,
    settings: RenderSettings | None = None,
) -> float:
    """Mean consistency over the training views, each repaired against its own reference."""
    cfg = cfg or ExplorationConfig()
    if not poses:
        raise ValueError("baseline needs at least one training pose")
    scores = []
    for p, ref in zip(poses, references):
        img = render(scene, p, intr, settings).color
        try:
            fixed = repair(provider, RepairRequest(img, ref, cfg.t0, p))
        except ProviderError as e:
            raise ExplorationSkipped(f"baseline repair failed: {e}") from e
        scores.append(consistency(img, fixed))
    return float(np.mean(scores))


def score_candidate(
    scene: GaussianScene,
    provider: PriorProvider,
    pose: PoseSE3,
    references: list[tuple[PoseSE3, np.ndarray]],
    baseline: float,
    intr: CameraIntrinsics,
    cfg: ExplorationConfig | None = None,
    settings: RenderSettings | None = None,
) -> ScoredCandidate:
    cfg = cfg or ExplorationConfig()
    k = nearest_reference(pose, [p for p, _ in references])
    img = render(scene, pose, intr, settings).color
    try:
        fixed = repair(provider, RepairRequest(img, references[k][1], cfg.t0, pose))
    except ProviderError as e:
        log.warning("candidate left unscored: %s", e)
        return ScoredCandidate(pose, img, None, math.nan, math.nan, False, k, str(e))
    s = consistency(img, fixed)
    st = cfg.normalize(s, baseline)
    return ScoredCandidate(pose, img, fixed, s, st, cfg.accepts(st), k)


@dataclass
class ExploreResult:
    baseline: float
    scored: list[ScoredCandidate]

    @property
    def accepted(self) -> list[ScoredCandidate]:
        return [c for c in self.scored if c.accepted]

    def trace(self) -> dict:
        return {"baseline": self.baseline, "candidates": [c.trace() for c in self.scored]}


def explore(
    scene: GaussianScene,
    provider: PriorProvider,
    buffer: ViewBuffer,
    references: list[tuple[PoseSE3, np.ndarray]],
    intr: CameraIntrinsics,
    cfg: ExplorationConfig | None = None,
    baseline: float | None = None,
    settings: RenderSettings | None = None,
) -> ExploreResult:
    """One exploration round. Accepted candidates are appended to ``buffer`` after all are scored."""
    cfg = cfg or ExplorationConfig()
    if baseline is None:
        baseline = baseline_score(scene, provider, [p for p, _ in references], [r for _, r in references], intr, cfg, settings)
    cands = candidate_slots(buffer.poses, cfg)

    def score(item):
        p, slot = item
        c = score_candidate(scene, provider, p, references, baseline, intr, cfg, settings)
        c.slot = slot
        return c

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            scored = list(ex.map(score, cands))
    else:
        scored = [score(p) for p in cands]
    for c in scored:
        if c.accepted:
            buffer.add(c)
    log.info("exploration: %d candidates, %d accepted, baseline %.2f dB", len(scored), sum(c.accepted for c in scored), baseline)
    return ExploreResult(baseline, scored)


def config_dict(cfg: ExplorationConfig) -> dict:
    return asdict(cfg)
