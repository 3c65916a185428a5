"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (with the measured
numbers) straight to the terminal, then asserts. The ablation runs are shared
by criteria 5, 8 and 10 through a module-scoped fixture.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import requests
import torch
import torch.nn.functional as F

from blursplat.blur import ExposureSegment, synthesize_blur
from blursplat.camera import CameraIntrinsics
from blursplat.explore import ExplorationConfig, baseline_score, generate_candidates, score_candidate
from blursplat.harness.benchmark import BenchmarkSpec, build_benchmark
from blursplat.harness.evaluate import desk_train_config, run_ablation
from blursplat.harness.service import OracleServer
from blursplat.harness.spectrum import radial_spectrum
from blursplat.imageio import png_to_b64, quantize16
from blursplat.lie import PoseSE3, Rotation, pose_distance, se3_exp, se3_exp_arrays, se3_log, se3_log_arrays
from blursplat.metrics import psnr, ssim
from blursplat.priors import GroundTruthOracle, NoisyOracle, RemoteProvider, RepairRequest
from blursplat.scene import SceneRecipe, generate_scene
from blursplat.splat import RenderSettings
from blursplat.train import Dataset, TrainConfig, train

from conftest import random_scene
from test_splat import _fd_check

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail, seconds):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f}s)")
        return ok

    return _report


@pytest.fixture(scope="module")
def desk():
    return build_benchmark(BenchmarkSpec())


@pytest.fixture(scope="module")
def ablation(desk, tmp_path_factory):
    ds = desk.dataset(3)
    out = tmp_path_factory.mktemp("ablation")
    t = time.perf_counter()
    rep, runs = run_ablation(ds, desk_train_config(), GroundTruthOracle(desk.scene, desk.intr), seeds=SEEDS,
                             out_dir=out)
    return rep, runs, time.perf_counter() - t, out


# ---------------------------------------------------------------- 1


def test_c1_lie_round_trip(report):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    omega = rng.normal(size=(10_000, 3))
    omega *= (rng.uniform(0, math.pi - 0.1, 10_000) / np.linalg.norm(omega, axis=1))[:, None]
    xi = np.c_[omega, rng.normal(size=(10_000, 3))]
    q, tr = se3_exp_arrays(xi)
    err = np.linalg.norm(se3_log_arrays(q, tr) - xi, axis=1).max()
    dt = time.perf_counter() - t
    assert report(1, err < 1e-9 and dt < 1.0, f"max |log(exp(xi)) - xi| = {err:.2e}", dt)


# ---------------------------------------------------------------- 2


def test_c2_rasterizer_gradients(report):
    t = time.perf_counter()
    rng = np.random.default_rng(77)
    intr = CameraIntrinsics.from_fov(32, 32, 60)
    oks = []
    for _ in range(20):
        n = int(rng.integers(5, 31))
        pose = PoseSE3(Rotation.from_rotvec(rng.normal(0, 0.05, 3)), np.r_[rng.normal(0, 0.05, 2), -2.5])
        oks.append(_fd_check(random_scene(rng, n), pose, intr, RenderSettings(), rng))
    frac = float(np.concatenate(oks).mean())
    dt = time.perf_counter() - t
    assert report(2, frac >= 0.99 and dt < 120, f"{frac:.2%} of {sum(map(len, oks))} coordinates match FD", dt)


# ---------------------------------------------------------------- 3


def test_c3_blur_formation_fidelity(report, desk):
    t = time.perf_counter()
    vals = []
    for i in desk.spec.views[3]:
        s, e = desk.segments[i]
        a = synthesize_blur(desk.scene, ExposureSegment(s, e, 10), desk.intr).color
        d = synthesize_blur(desk.scene, ExposureSegment(s, e, 1000), desk.intr).color
        vals.append(psnr(a, d))
    dt = time.perf_counter() - t
    assert report(3, min(vals) > 40 and dt < 30, f"min PSNR(n=10, n=1000) = {min(vals):.2f} dB", dt)


# ---------------------------------------------------------------- 4


def test_c4_pose_recovery(report):
    t = time.perf_counter()
    b = build_benchmark(BenchmarkSpec(recipe=SceneRecipe(seed=2, count=200, layout="cluster-field")))
    i = 15
    ds = Dataset(b.intr, [i], [b.blurry[i]], [b.poses[i]], [b.poses[i]], [], [], [], b.scene.bbox())
    cfg = TrainConfig(total_iters=3000, warmup_iters=0, optimize_scene=False, lambda_pr=0, lambda_geo=0,
                      lambda_reg=0, pose_noise_rot_deg=0, pose_noise_trans_frac=0)
    seg = train(ds, cfg, None, scene=b.scene).segments[0]
    gs, ge = b.segments[i]

    def err(a, c):
        x = se3_log(a.inverse() @ c)
        return math.degrees(np.linalg.norm(x[:3])), float(np.linalg.norm(x[3:]))

    # start and end are interchangeable under the blur model; score the better labelling
    pairs = [(err(seg.T_start, gs), err(seg.T_end, ge)), (err(seg.T_start, ge), err(seg.T_end, gs))]
    rot, trans = min((max(a[0], b_[0]), max(a[1], b_[1])) for a, b_ in pairs)
    limit = 0.01 * b.scene.extent()
    dt = time.perf_counter() - t
    ok = rot < 0.5 and trans < limit and dt < 300
    assert report(4, ok, f"rotation {rot:.3f} deg, translation {trans:.4f} (limit {limit:.4f})", dt)


# ---------------------------------------------------------------- 5


def test_c5_directional_ablation(report, ablation):
    rep, _, dt, _ = ablation
    m = {r["stage"]: r["psnr"] for r in rep["rows"]}
    order = ["baseline", "+geo", "+deblur", "+depth"]
    gain = m["+depth"] - m["baseline"]
    steps = [m[b] - m[a] for a, b in zip(order, order[1:])]
    ok = gain >= 2.0 and all(s >= -0.2 for s in steps) and dt < 1800
    detail = " -> ".join(f"{s} {m[s]:.2f}" for s in order) + f"; full - baseline = {gain:+.2f} dB"
    assert report(5, ok, detail, dt)


# ---------------------------------------------------------------- 6


class _PerPoseNoise:
    capabilities = frozenset({"deblur", "repair"})
    identity = "per-pose"

    def __init__(self, scene, intr, table, default):
        self.scene, self.intr, self.table, self.default = scene, intr, table, default

    def _pick(self, pose):
        for p, sigma in self.table:
            if pose_distance(p, pose) < 1e-12:
                return NoisyOracle(self.scene, self.intr, sigma, seed=1)
        return NoisyOracle(self.scene, self.intr, self.default, seed=1)

    def deblur(self, image, pose=None):
        return self._pick(pose).deblur(image, pose)

    def repair(self, req):
        return self._pick(req.pose).repair(req)


def test_c6_band_pass_decision_table(report):
    t = time.perf_counter()
    intr = CameraIntrinsics.from_fov(48, 48, 40)
    wall = generate_scene(SceneRecipe(seed=3, count=400, layout="textured-wall", color_scheme="mono"))
    train_poses = [PoseSE3(Rotation(), np.array([x, 0.0, -2.2])) for x in (-0.3, 0.3)]
    oracle = GroundTruthOracle(wall, intr)
    refs = [(p, oracle.deblur(np.zeros((48, 48, 3)), p)) for p in train_poses]
    sigmas = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3]
    cands = generate_candidates(train_poses, ExplorationConfig(candidates_per_pair=60, extrapolation_margin=0.0))
    table = [(p, sigmas[k // 10]) for k, p in enumerate(cands)]
    prov = _PerPoseNoise(wall, intr, table, default=0.01)
    cfg = ExplorationConfig(s_min=2.5, s_max=8.5)
    base = baseline_score(wall, prov, train_poses, [r for _, r in refs], intr, cfg)
    # brute-force table: the render is exact, so the candidate PSNR is the noise PSNR -20 log10(sigma)
    agree = sum(score_candidate(wall, prov, p, refs, base, intr, cfg).accepted == cfg.accepts(base + 20 * math.log10(s))
                for p, s in table)
    dt = time.perf_counter() - t
    assert report(6, agree == 60 == len(table) and dt < 60, f"{agree}/{len(table)} decisions match", dt)


# ---------------------------------------------------------------- 7


def _ssim_torch(a, b, c1=1e-4, c2=9e-4):
    """Reference SSIM in the common convolutional form: 11x11 Gaussian, sigma 1.5, zero padding."""
    x = torch.arange(11, dtype=torch.float64) - 5
    g = torch.exp(-x**2 / (2 * 1.5**2))
    g = g / g.sum()
    w = (g[:, None] * g[None, :]).expand(3, 1, 11, 11).contiguous()
    A = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]
    B = torch.from_numpy(np.ascontiguousarray(b.transpose(2, 0, 1)))[None]

    def f(z):
        return F.conv2d(z, w, padding=5, groups=3)

    ma, mb = f(A), f(B)
    va, vb, cov = f(A * A) - ma**2, f(B * B) - mb**2, f(A * B) - ma * mb
    m = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return float(m.mean())


def test_c7_metric_oracles(report):
    t = time.perf_counter()
    rng = np.random.default_rng(9)
    x = rng.uniform(size=(32, 32, 3))
    identity = ssim(x, x)[0]
    base = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    p20 = psnr(base + 0.1, base)
    yy, xx = np.mgrid[:40, :40] / 39.0
    grad = np.stack([xx, yy, 0.5 * (xx + yy)], axis=2)
    pairs = [
        (x, np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)),
        (grad, np.clip(grad * 0.8 + 0.1, 0, 1)),
        (grad, grad[::-1].copy()),
        (rng.uniform(size=(24, 40, 3)), rng.uniform(size=(24, 40, 3))),
        (np.full((20, 20, 3), 0.3), np.clip(np.full((20, 20, 3), 0.3) + rng.normal(0, 0.1, (20, 20, 3)), 0, 1)),
    ]
    diffs = [abs(ssim(a, b)[0] - _ssim_torch(a, b)) for a, b in pairs]
    dt = time.perf_counter() - t
    ok = identity == 1.0 and abs(p20 - 20.0) <= 1e-6 and max(diffs) < 1e-4 and dt < 10
    assert report(7, ok, f"SSIM(x,x)={identity!r}, PSNR(+0.1)={p20:.9f}, max |SSIM - ref| = {max(diffs):.1e}", dt)


# ---------------------------------------------------------------- 8


def test_c8_spectrum_monotonicity(report, ablation):
    t = time.perf_counter()
    amps = [0.0, 0.075, 0.15, 0.225, 0.3]
    ratios = []
    for a in amps:
        b = build_benchmark(BenchmarkSpec(amplitude=a, n_frames=8, views={3: [1, 3, 5]}))
        ratios.append(float(np.mean([radial_spectrum(img).hf_ratio for img in b.blurry])))
    monotone = all(x > y for x, y in zip(ratios, ratios[1:]))
    rep = ablation[0]
    hf = {r["stage"]: r["hf_ratio"] for r in rep["rows"]}
    gt = rep["gt_hf_ratio"]
    closer = abs(hf["+depth"] - gt) < abs(hf["baseline"] - gt)
    dt = time.perf_counter() - t
    detail = (f"sweep {' > '.join(f'{r:.4f}' for r in ratios)}; HF full {hf['+depth']:.4f} / "
              f"baseline {hf['baseline']:.4f} / gt {gt:.4f}")
    assert report(8, monotone and closer and dt < 120, detail, dt)


# ---------------------------------------------------------------- 9


def test_c9_protocol_hermeticity(report):
    t = time.perf_counter()
    intr = CameraIntrinsics.from_fov(32, 32, 50)
    scene = generate_scene(SceneRecipe(seed=5, count=120, layout="textured-wall"))
    base = PoseSE3(Rotation(), np.array([0.0, 0.0, -2.4]))
    rng = np.random.default_rng(31)
    reqs = []
    for k in range(50):
        pose = se3_exp(np.r_[rng.normal(0, 0.05, 3), rng.normal(0, 0.1, 3)]) @ base
        img = quantize16(rng.uniform(size=(32, 32, 3)))
        reqs.append(("deblur", img, pose) if k % 2 == 0 else ("repair", img, pose))
    local = GroundTruthOracle(scene, intr)

    def call(prov, r):
        kind, img, pose = r
        return prov.deblur(img, pose) if kind == "deblur" else prov.repair(RepairRequest(img, img, 199, pose))

    with OracleServer(scene, intr) as srv:
        remote = RemoteProvider(srv.url, max_inflight=16)
        serial = sum(np.array_equal(call(remote, r), call(local, r)) for r in reqs)
        with ThreadPoolExecutor(16) as ex:
            outs = list(ex.map(lambda r: call(remote, r), reqs))
        concurrent = sum(np.array_equal(o, call(local, r)) for o, r in zip(outs, reqs))
        bad = requests.post(srv.url + "/v1/deblur", json={"image": png_to_b64(np.zeros((32, 32, 3))),
                                                            "pose": {"q": [1, 0, "x", 0], "t": [0, 0, 0]}})
        field = bad.json().get("field") if bad.status_code == 422 else None
    dt = time.perf_counter() - t
    ok = serial == concurrent == 50 and field == "pose.q[2]" and dt < 30
    assert report(9, ok, f"serial {serial}/50, 16-way {concurrent}/50 bit-identical; malformed -> "
                         f"{bad.status_code} field {field}", dt)


# ---------------------------------------------------------------- 10


def test_c10_determinism(report, ablation, desk, tmp_path):
    _, runs, _, out = ablation
    t = time.perf_counter()
    first = next(r for r in runs if r.stage == "+depth" and r.seed == SEEDS[0])
    train(desk.dataset(3), desk_train_config(seed=SEEDS[0]), GroundTruthOracle(desk.scene, desk.intr),
          out_dir=tmp_path / "again")
    same = (tmp_path / "again" / "metrics.csv").read_bytes() == first.metrics_csv
    dt = time.perf_counter() - t
    assert report(10, same, "repeat run metrics.csv " + ("identical" if same else "DIFFERS"), dt)


# ---------------------------------------------------------------- supporting checks (not numbered criteria)


def test_plain_fitting_sanity(desk):
    # sharp, static input with every prior off is ordinary splat fitting; the 9-view set is used
    # because three views cannot pin down novel frames to this level
    b = build_benchmark(BenchmarkSpec(amplitude=0.0))
    cfg = desk_train_config(total_iters=2000, eval_interval=2000, lambda_pr=0, lambda_geo=0, lambda_reg=0,
                            pose_noise_rot_deg=0, pose_noise_trans_frac=0, optimize_poses=False)
    res = train(b.dataset(9), cfg, None)
    assert res.heldout_psnr > 30.0


def test_blurry_loss_trailing_mean_falls(ablation):
    import csv
    import io

    _, runs, _, _ = ablation
    for r in runs:
        rows = list(csv.DictReader(io.StringIO(r.metrics_csv.decode())))
        lb = {int(x["iter"]): float(x["L_blurry"]) for x in rows}
        last = max(lb)
        trailing = np.mean([v for i, v in lb.items() if i > last - 500])  # rows are logged every log_interval
        assert trailing < lb[500], (r.stage, r.seed)
