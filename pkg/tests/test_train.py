import csv
import json
import math

import numpy as np
import pytest

from blursplat.blur import ExposureSegment
from blursplat.camera import CameraIntrinsics
from blursplat.lie import PoseSE3, Rotation, pose_distance, se3_exp
from blursplat.priors import GroundTruthOracle, ProviderError
from blursplat.scene import SceneRecipe, generate_scene
from blursplat.splat import render
from blursplat.train import (
    METRIC_COLUMNS,
    AdamState,
    ConfigError,
    Dataset,
    LossWeights,
    TrainConfig,
    adam_step,
    coverage_depth_reg_loss,
    depth_reg_loss,
    init_state,
    pose_lr,
    prune,
    total_loss,
    train,
)

INTR = CameraIntrinsics.from_fov(24, 24, 50)


@pytest.fixture(scope="module")
def tiny():
    """Three blurry views of a small wall scene, two held-out sharp views."""
    scene = generate_scene(SceneRecipe(seed=4, count=80, layout="textured-wall"))
    poses = [PoseSE3(Rotation(), np.array([x, 0.0, -2.2])) for x in (-0.3, -0.15, 0.0, 0.15, 0.3)]
    train_ids, test_ids = [0, 2, 4], [1, 3]
    blurry, segs = [], []
    for i in train_ids:
        s = ExposureSegment(poses[i] @ se3_exp([0, 0, 0, -0.03, 0, 0]), poses[i] @ se3_exp([0, 0, 0, 0.03, 0, 0]), 10)
        from blursplat.blur import synthesize_blur

        blurry.append(synthesize_blur(scene, s, INTR).color)
        segs.append((s.T_start, s.T_end))
    ds = Dataset(
        INTR, train_ids, blurry, [poses[i] for i in train_ids], [poses[i] for i in train_ids], test_ids,
        [render(scene, poses[i], INTR).color for i in test_ids], [poses[i] for i in test_ids], scene.bbox(), segs,
    )
    return scene, ds


def short_cfg(**kw):
    base = dict(total_iters=12, warmup_iters=4, gen_interval=4, eval_interval=6, prune_interval=6, init_count=60,
                log_interval=1, candidates_per_pair=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- losses


def test_depth_reg_constant_is_zero():
    loss, adj = depth_reg_loss(np.full((5, 7), 3.0))
    assert loss == 0.0 and not adj.any()


def test_depth_reg_ramp_closed_form():
    H, W, k = 6, 9, -0.7
    D = k * np.tile(np.arange(W, dtype=float), (H, 1))
    loss, _ = depth_reg_loss(D)
    assert loss == pytest.approx(abs(k) * H * (W - 1) / (H * W), rel=1e-14)


def test_depth_reg_adjoint_fd():
    rng = np.random.default_rng(0)
    D = rng.normal(size=(6, 5))
    _, adj = depth_reg_loss(D)
    h = 1e-7
    for idx in np.ndindex(D.shape):
        e = np.zeros_like(D)
        e[idx] = h
        fd = (depth_reg_loss(D + e)[0] - depth_reg_loss(D - e)[0]) / (2 * h)
        assert fd == pytest.approx(adj[idx], rel=1e-3, abs=1e-9)


def test_depth_reg_ties_give_zero_subgradient():
    D = np.zeros((3, 3))
    D[1, 1] = 1.0
    _, adj = depth_reg_loss(D)
    # corners only touch tied neighbours; the spike sees four unit steps
    assert adj[0, 0] == adj[0, 2] == adj[2, 0] == adj[2, 2] == 0.0
    assert adj[1, 1] == pytest.approx(4 / 9)


def test_coverage_reg_equals_plain_tv_at_full_coverage():
    D = np.random.default_rng(1).normal(size=(5, 6))
    loss, gd, _ = coverage_depth_reg_loss(D, np.ones_like(D))
    ref, adj = depth_reg_loss(D)
    assert loss == pytest.approx(ref, rel=1e-14)
    np.testing.assert_allclose(gd, adj, atol=1e-15)


def test_coverage_reg_ignores_void():
    # a covered square at depth 2 on an empty background: no silhouette penalty
    A = np.zeros((6, 6))
    A[1:4, 1:4] = 1.0
    loss, gd, ga = coverage_depth_reg_loss(2.0 * A, A)
    assert loss == 0.0 and not gd.any() and not ga[A > 0].any()
    # growing coverage into the void would create a penalized pair
    assert (ga >= 0).all() and ga[0, 2] > 0
    assert depth_reg_loss(2.0 * A)[0] > 0


def test_coverage_reg_adjoints_fd():
    rng = np.random.default_rng(2)
    A = rng.uniform(0.05, 0.95, size=(5, 4))
    D = A * rng.uniform(1.0, 3.0, size=(5, 4))
    _, gd, ga = coverage_depth_reg_loss(D, A)
    h = 1e-7
    for idx in np.ndindex(D.shape):
        e = np.zeros_like(D)
        e[idx] = h
        fd_d = (coverage_depth_reg_loss(D + e, A)[0] - coverage_depth_reg_loss(D - e, A)[0]) / (2 * h)
        fd_a = (coverage_depth_reg_loss(D, A + e)[0] - coverage_depth_reg_loss(D, A - e)[0]) / (2 * h)
        assert fd_d == pytest.approx(gd[idx], rel=1e-5, abs=1e-9)
        assert fd_a == pytest.approx(ga[idx], rel=1e-5, abs=1e-9)


def test_total_loss_cases():
    comps = {"L_blurry": 0.0, "L_pr": 0.3, "L_geo": 5.0, "L_reg": 2.0}
    assert total_loss({**comps, "L_pr": 0.0}, LossWeights(), buffer_empty=True) == 0.0
    assert total_loss(comps, LossWeights(0, 0, 0)) == 0.0
    w = LossWeights()
    assert (w.lambda_pr, w.lambda_geo, w.lambda_reg) == (0.01, 0.01, 0.1)
    assert total_loss({**comps, "L_blurry": 1.0}, w) == pytest.approx(1.0 + 0.003 + 0.05 + 0.2)


def test_default_weights_match_reference_values():
    c = TrainConfig()
    assert (c.lambda_1, c.lambda_ssim, c.lambda_pr, c.lambda_geo, c.lambda_reg) == (0.8, 0.2, 0.01, 0.01, 0.1)
    assert (c.total_iters, c.warmup_iters, c.gen_interval, c.n_virtual) == (7000, 1500, 200, 10)


# ---------------------------------------------------------------- Adam and schedule


def test_adam_quadratic_converges():
    x = np.array([3.0])
    st = AdamState(np.zeros(1), np.zeros(1))
    for _ in range(500):
        adam_step(x, st, 2 * (x - 1.25), 1e-2)
    assert abs(x[0] - 1.25) < 1e-2


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    x = np.array([1.0, 2.0])
    st = AdamState(np.array([0.5, 0.5]), np.array([0.25, 0.25]), t=3)
    adam_step(x, st, np.zeros(2), 0.1)
    assert x.tolist() == [1.0, 2.0]
    np.testing.assert_allclose(st.m, 0.45)
    np.testing.assert_allclose(st.v, 0.25 * 0.999)


def test_adam_non_finite_is_skipped():
    x = np.array([1.0])
    st = AdamState(np.zeros(1), np.zeros(1))
    assert adam_step(x, st, np.array([np.nan]), 0.1) is False
    assert x[0] == 1.0 and st.t == 0


def test_pose_lr_endpoints():
    c = TrainConfig()
    assert pose_lr(c, 0) == pytest.approx(5e-3, rel=1e-12)
    assert pose_lr(c, 7000) == pytest.approx(5e-5, rel=1e-2)
    assert pose_lr(c, 3500) == pytest.approx(math.sqrt(5e-3 * 5e-5), rel=1e-9)


@pytest.mark.parametrize(
    "kw",
    [
        dict(warmup_iters=8000),
        dict(lambda_geo=-1.0),
        dict(pose_lr_start=1e-5, pose_lr_end=1e-4),
        dict(pose_lr_end=0.0),
        dict(exploration_profile="indoor"),
        dict(depth_reg_target="both"),
        dict(depth_reg_mode="smooth"),
        dict(init_source="sfm"),
    ],
)
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"total_iter": 5})
    assert TrainConfig.from_dict({"total_iters": 5, "warmup_iters": 1}).total_iters == 5


def test_dataset_invariants(tiny):
    _, ds = tiny
    with pytest.raises(ValueError):
        Dataset(INTR, [], [], [], [], [], [], [], ds.bounds)
    with pytest.raises(ValueError):
        Dataset(INTR, [1], ds.blurry[:1], ds.init_poses[:1], ds.init_poses[:1], [1], ds.test_images[:1],
                ds.test_poses[:1], ds.bounds)


# ---------------------------------------------------------------- state handling


def test_init_state_zero_motion_and_noise(tiny):
    _, ds = tiny
    cfg = TrainConfig(pose_noise_rot_deg=1.0, pose_noise_trans_frac=0.005)
    st = init_state(ds, cfg, np.random.default_rng(0))
    for seg, T in zip(st.segments, ds.init_poses):
        assert 0 < pose_distance(seg.T_start, seg.T_end) < 1e-3
        d = np.linalg.norm(np.asarray((T.inverse() @ seg.T_start).translation))
        assert d <= 0.005 * ds.extent + 2e-4
    assert len(st.buffer.poses) == len(ds.train_ids) and not st.buffer.generated


def test_init_from_point_cloud(tiny):
    from dataclasses import replace

    from blursplat.scene import SH_C0

    _, ds = tiny
    pts = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.1]])
    rgb = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 0.2, 0.2]])
    ds2 = replace(ds, init_points=(pts, rgb))
    st = init_state(ds2, TrainConfig(init_count=50), np.random.default_rng(0))
    np.testing.assert_allclose(st.scene.means, pts)
    np.testing.assert_allclose(SH_C0 * st.scene.sh[:, 0], rgb)
    st = init_state(ds2, TrainConfig(init_count=50, init_source="random"), np.random.default_rng(0))
    assert len(st.scene) == 50 and np.allclose(SH_C0 * st.scene.sh[:, 0], 0.5)


def test_prune_threshold_is_respected(tiny):
    _, ds = tiny
    st = init_state(ds, short_cfg(), np.random.default_rng(0))
    op = np.linspace(0.001, 0.01, len(st.scene))
    st.scene.opacity_logits[:] = np.log(op / (1 - op))
    removed = prune(st, 0.005)
    assert removed == int((op < 0.005).sum())
    assert np.all(st.scene.opacities >= 0.005 - 1e-15)
    assert all(a.m.shape[0] == len(st.scene) for a in st.adam.values())


# ---------------------------------------------------------------- loop


def test_run_directory_and_metrics(tiny, tmp_path):
    scene, ds = tiny
    r = train(ds, short_cfg(), GroundTruthOracle(scene, INTR), out_dir=tmp_path)
    for f in ("scene.json", "poses.json", "metrics.csv", "config.json"):
        assert (tmp_path / f).exists()
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert len(rows) == 13
    assert rows[6][5] != "" and rows[1][5] == ""
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["config_hash"] == short_cfg().digest()
    assert len(json.loads((tmp_path / "poses.json").read_text())["frames"]) == 3
    assert math.isfinite(r.heldout_psnr)


def test_seeded_runs_are_identical(tiny, tmp_path):
    scene, ds = tiny
    for d in ("a", "b"):
        train(ds, short_cfg(seed=7), GroundTruthOracle(scene, INTR), out_dir=tmp_path / d)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_unsampled_frames_keep_their_poses(tiny):
    scene, ds = tiny
    seen = []

    def cb(state):
        seen.append([(s.T_start.translation.copy(), s.T_end.translation.copy()) for s in state.segments])

    train(ds, short_cfg(total_iters=3, warmup_iters=0, lambda_geo=0, lambda_reg=0), GroundTruthOracle(scene, INTR), callback=cb)
    for before, after in zip(seen, seen[1:]):
        changed = [not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])) for a, b in zip(before, after)]
        assert sum(changed) <= 1


def test_pose_only_mode_freezes_scene(tiny):
    scene, ds = tiny
    r = train(ds, short_cfg(total_iters=3, warmup_iters=0, optimize_scene=False, lambda_pr=0, lambda_geo=0, lambda_reg=0),
              None, scene=scene)
    np.testing.assert_array_equal(r.scene.means, scene.means)


def test_missing_provider_is_a_config_error(tiny):
    _, ds = tiny
    with pytest.raises(ConfigError):
        train(ds, short_cfg(), None)


class _DeblurFails:
    capabilities = frozenset({"deblur", "repair"})
    identity = "broken"

    def deblur(self, image, pose=None):
        raise ProviderError("down")

    def repair(self, req):
        raise ProviderError("down")


def test_deblur_failure_at_startup_is_fatal(tiny):
    _, ds = tiny
    with pytest.raises(ProviderError):
        train(ds, short_cfg(), _DeblurFails())


class _RepairFails(GroundTruthOracle):
    def repair(self, req):
        raise ProviderError("repair offline")


def test_repair_outage_skips_exploration(tiny):
    scene, ds = tiny
    r = train(ds, short_cfg(), _RepairFails(scene, INTR))
    assert any(e["event"] == "exploration_skipped" for e in r.events)
    assert not r.buffer.generated


def test_generated_targets_are_stop_gradient_copies(tiny):
    """Mutating the provider's returned arrays after acceptance must not change buffered targets."""
    scene, ds = tiny
    handed_out = []

    class Leaky(GroundTruthOracle):
        def repair(self, req):
            out = super().repair(req)
            handed_out.append(out)
            return out

    cfg = short_cfg(s_min=-math.inf, s_max=math.inf)
    r = train(ds, cfg, Leaky(scene, INTR))
    assert r.buffer.generated and handed_out
    before = [g.image.copy() for g in r.buffer.generated]
    for arr in handed_out:
        arr[...] = -1.0
    for g, b in zip(r.buffer.generated, before):
        np.testing.assert_array_equal(g.image, b)
        assert not g.image.flags.writeable
