import math

import numpy as np
import pytest

from blursplat.camera import CameraIntrinsics
from blursplat.lie import PoseSE3, Rotation, quat_multiply, se3_exp, so3_exp
from blursplat.scene import SH_C0, Gaussian, GaussianScene
from blursplat.splat import RenderSettings, available_backends, project, render, render_backward

from conftest import random_scene

INTR = CameraIntrinsics(fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)
POSE = PoseSE3(Rotation(), np.array([0.0, 0.0, -2.0]))


def single(mu, sigma, opacity, rgb):
    sh = np.zeros((1, 3))
    sh[0] = np.asarray(rgb) / SH_C0
    return Gaussian(np.asarray(mu, float), np.log(np.full(3, sigma)), Rotation(), math.log(opacity / (1 - opacity)), sh)


def scene_of(*gs):
    return GaussianScene.from_gaussians(list(gs), sh_degree=0)


def brute_force(gaussians, pose, intr, px, py, alpha_min=1 / 255, alpha_max=0.999):
    """Independent per-pixel compositing with hand-written projection."""
    W = pose.rotation.matrix().T
    items = []
    for g in gaussians:
        p = W @ (g.mu - pose.translation)
        x, y, z = p
        J = np.array([[intr.fx / z, 0, -intr.fx * x / z**2], [0, intr.fy / z, -intr.fy * y / z**2]])
        Rg = g.rotation.matrix()
        S = np.diag(np.exp(g.log_scale))
        cov = J @ W @ Rg @ S @ S @ Rg.T @ W.T @ J.T + 0.3 * np.eye(2)
        m = np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])
        c = np.clip(g.sh[0] * SH_C0, 0, 1)
        items.append((z, m, np.linalg.inv(cov), g.opacity, c))
    items.sort(key=lambda it: it[0])
    T, C, D = 1.0, np.zeros(3), 0.0
    for z, m, K, o, c in items:
        d = np.array([px, py], float) - m
        a = min(alpha_max, o * math.exp(-0.5 * d @ K @ d))
        if a < alpha_min:
            continue
        C += T * a * c
        D += T * a * z
        T *= 1 - a
    return C, D, 1 - T


def test_project_on_optical_axis():
    g = single([0, 0, 1.0], 0.1, 0.5, [1, 1, 1])
    m, cov, depth, valid = project(g, POSE, INTR)
    np.testing.assert_allclose(m, [16.0, 16.0])
    assert valid and depth == pytest.approx(3.0)


def test_project_isotropic_covariance():
    sigma, z = 0.05, 3.0
    g = single([0, 0, 1.0], sigma, 0.5, [1, 1, 1])
    _, cov, _, _ = project(g, POSE, INTR)
    expected = np.diag([(INTR.fx * sigma / z) ** 2, (INTR.fy * sigma / z) ** 2]) + 0.3 * np.eye(2)
    np.testing.assert_allclose(cov, expected, rtol=0.01)


def test_project_behind_camera_invalid():
    g = single([0, 0, -3.0], 0.1, 0.5, [1, 1, 1])
    assert project(g, POSE, INTR)[3] is False


def test_empty_frustum_renders_black():
    s = scene_of(single([0, 0, -5.0], 0.1, 0.9, [1, 0, 0]), single([50, 0, 1.0], 0.1, 0.9, [0, 1, 0]))
    out = render(s, POSE, INTR)
    assert not out.color.any() and not out.depth.any() and not out.alpha.any()
    assert out.stats["n_visible"] == 0


def test_single_centered_gaussian_peak():
    o, c = 0.8, np.array([0.9, 0.5, 0.2])
    out = render(scene_of(single([0, 0, 1.0], 0.1, o, c)), POSE, INTR)
    np.testing.assert_allclose(out.color[16, 16], o * c, atol=1e-12)
    np.testing.assert_allclose(out.alpha[16, 16], o, atol=1e-12)
    np.testing.assert_allclose(out.depth[16, 16], o * 3.0, atol=1e-12)


@pytest.mark.parametrize("backend", available_backends())
def test_two_overlapping_match_brute_force(backend):
    g1 = single([0.02, 0.0, 0.5], 0.12, 0.7, [0.9, 0.1, 0.1])
    g2 = single([-0.05, 0.03, 1.0], 0.2, 0.85, [0.1, 0.2, 0.9])
    out = render(scene_of(g1, g2), POSE, INTR, RenderSettings(backend=backend))
    for px, py in [(16, 16), (14, 17), (19, 15), (10, 12), (22, 20)]:
        C, D, A = brute_force([g1, g2], POSE, INTR, px, py)
        np.testing.assert_allclose(out.color[py, px], C, atol=1e-12)
        assert out.depth[py, px] == pytest.approx(D, abs=1e-12)
        assert out.alpha[py, px] == pytest.approx(A, abs=1e-12)


def test_random_scene_matches_brute_force(rng, small_intr, front_pose):
    s = random_scene(rng, 15, sh_degree=0)
    out = render(s, front_pose, small_intr)
    gs = [s[i] for i in range(len(s))]
    for px, py in rng.integers(0, 32, (25, 2)):
        C, D, A = brute_force(gs, front_pose, small_intr, px, py)
        np.testing.assert_allclose(out.color[py, px], C, atol=1e-12)
        assert out.alpha[py, px] == pytest.approx(A, abs=1e-12)


def test_weight_conservation(rng, small_intr, front_pose):
    s = random_scene(rng, 25, sh_degree=0)
    s.sh[:, 0] = 1.0 / SH_C0  # white: color channel = sum of T_i alpha_i
    out = render(s, front_pose, small_intr)
    np.testing.assert_allclose(out.color[..., 0] + out.T_final, 1.0, atol=1e-6)
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))


def test_depth_at_least_near_where_covered(rng, small_intr, front_pose):
    s = random_scene(rng, 25)
    out = render(s, front_pose, small_intr)
    covered = out.alpha > 1e-4
    # expected depth is alpha-weighted, so normalize before comparing to near
    assert np.all(out.depth[covered] / out.alpha[covered] >= small_intr.near)


def test_monotone_occlusion():
    front = single([0, 0, 0.5], 0.15, 0.3, [1, 0, 0])
    back = single([0.05, 0, 1.0], 0.2, 0.9, [0, 1, 0])
    s = scene_of(front, back)
    weights = []
    for o in (0.3, 0.5, 0.7, 0.9):
        s.opacity_logits[0] = math.log(o / (1 - o))
        s.sh[1, 0] = 0.0
        red = render(s, POSE, INTR).color[..., 0]
        weights.append(red)
    for a, b in zip(weights, weights[1:]):
        assert np.all(b >= a - 1e-15)


def test_deterministic_across_thread_counts(rng, front_pose):
    if "compiled" not in available_backends():
        pytest.skip("compiled backend unavailable")
    intr = CameraIntrinsics.from_fov(64, 48, 60)
    s = random_scene(rng, 60)
    gc = rng.normal(size=(48, 64, 3))
    res = []
    for nt in (1, 4):
        st = RenderSettings(nthreads=nt)
        out = render(s, front_pose, intr, st)
        g = render_backward(s, front_pose, intr, gc, settings=st, output=out)
        res.append((out.color, g.means, g.pose))
    for a, b in zip(*res):
        assert np.array_equal(a, b)


def test_backends_agree(rng, front_pose):
    if "compiled" not in available_backends():
        pytest.skip("compiled backend unavailable")
    intr = CameraIntrinsics.from_fov(40, 36, 55)
    s = random_scene(rng, 40)
    gc, gd = rng.normal(size=(36, 40, 3)), rng.normal(size=(36, 40))
    outs = {}
    for b in ("compiled", "python"):
        st = RenderSettings(backend=b)
        o = render(s, front_pose, intr, st)
        outs[b] = (o, render_backward(s, front_pose, intr, gc, gd, settings=st, output=o))
    (oc, gcm), (op, gp) = outs["compiled"], outs["python"]
    np.testing.assert_allclose(oc.color, op.color, atol=1e-13)
    np.testing.assert_allclose(oc.depth, op.depth, atol=1e-13)
    for name, arr in gcm.scene_arrays().items():
        np.testing.assert_allclose(arr, gp.scene_arrays()[name], atol=1e-9, rtol=1e-9)
    np.testing.assert_allclose(gcm.pose, gp.pose, rtol=1e-9, atol=1e-9)


def test_zero_adjoint_gives_zero_gradients(rng, small_intr, front_pose):
    s = random_scene(rng, 10)
    g = render_backward(s, front_pose, small_intr, np.zeros((32, 32, 3)), np.zeros((32, 32)))
    for arr in g.scene_arrays().values():
        assert not arr.any()
    assert not g.pose.any()


def test_culled_gaussians_get_zero_gradient(rng, small_intr, front_pose):
    s = random_scene(rng, 10)
    s.means[3] = [0, 0, -4.0]  # behind the camera
    g = render_backward(s, front_pose, small_intr, rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32)))
    assert not g.means[3].any() and not g.sh[3].any() and g.opacity_logits[3] == 0


def _fd_check(scene, pose, intr, settings, rng, h=1e-4):
    gc = rng.normal(size=(intr.height, intr.width, 3))
    gd = rng.normal(size=(intr.height, intr.width))

    def L(s, p=pose):
        o = render(s, p, intr, settings)
        return np.sum(o.color * gc) + np.sum(o.depth * gd)

    g = render_backward(scene, pose, intr, gc, gd, settings=settings)
    results = []

    def record(an, fd):
        results.append(abs(an - fd) < 1e-7 or abs(an - fd) / max(abs(fd), 1e-300) < 1e-3)

    for i in range(len(scene)):
        for attr in ("means", "log_scales"):
            for k in range(3):
                sp, sm = scene.copy(), scene.copy()
                getattr(sp, attr)[i, k] += h
                getattr(sm, attr)[i, k] -= h
                record(getattr(g, attr)[i, k], (L(sp) - L(sm)) / (2 * h))
        sp, sm = scene.copy(), scene.copy()
        sp.opacity_logits[i] += h
        sm.opacity_logits[i] -= h
        record(g.opacity_logits[i], (L(sp) - L(sm)) / (2 * h))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            sp, sm = scene.copy(), scene.copy()
            sp.quats[i] = quat_multiply(scene.quats[i], so3_exp(d))
            sm.quats[i] = quat_multiply(scene.quats[i], so3_exp(-d))
            record(g.rotations[i, k], (L(sp) - L(sm)) / (2 * h))
        for kk in range(scene.sh.shape[1]):
            for c in range(3):
                sp, sm = scene.copy(), scene.copy()
                sp.sh[i, kk, c] += h
                sm.sh[i, kk, c] -= h
                record(g.sh[i, kk, c], (L(sp) - L(sm)) / (2 * h))
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        record(g.pose[k], (L(scene, se3_exp(d) @ pose) - L(scene, se3_exp(-d) @ pose)) / (2 * h))
    return np.array(results)


@pytest.mark.parametrize("backend", available_backends())
def test_gradients_exact_without_skip_threshold(rng, small_intr, backend):
    pose = PoseSE3(Rotation.from_rotvec([0.03, -0.04, 0.02]), np.array([0.05, -0.03, -2.5]))
    st = RenderSettings(alpha_min=1e-10, backend=backend)
    ok = _fd_check(random_scene(rng, 12, scale_range=(0.05, 0.2)), pose, small_intr, st, rng)
    assert ok.all()


def test_gradients_default_settings(rng, small_intr):
    pose = PoseSE3(Rotation.from_rotvec([0.03, -0.04, 0.02]), np.array([0.05, -0.03, -2.5]))
    ok = _fd_check(random_scene(rng, 20), pose, small_intr, RenderSettings(), rng)
    assert ok.mean() >= 0.98


def test_gradients_without_jacobian_pose_term_differ(rng, small_intr, front_pose):
    s = random_scene(rng, 10)
    gc = rng.normal(size=(32, 32, 3))
    a = render_backward(s, front_pose, small_intr, gc, settings=RenderSettings())
    b = render_backward(s, front_pose, small_intr, gc, settings=RenderSettings(pose_grad_through_jacobian=False))
    np.testing.assert_array_equal(a.means, b.means)
    assert not np.allclose(a.pose, b.pose)


def test_pose_gradient_sign_translating_camera(rng, small_intr, front_pose):
    s = random_scene(rng, 20)
    gc = np.full((32, 32, 3), 1.0 / (32 * 32 * 3))

    def mean_color(p):
        return render(s, p, small_intr).color.mean()

    g = render_backward(s, front_pose, small_intr, gc)
    h = 1e-4
    d = np.array([0, 0, 0, h, 0, 0])
    slope = (mean_color(se3_exp(d) @ front_pose) - mean_color(se3_exp(-d) @ front_pose)) / (2 * h)
    assert np.sign(g.pose[3]) == np.sign(slope)


def test_render_rejects_empty_scene(small_intr, front_pose):
    empty = GaussianScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 4, 3)))
    with pytest.raises(ValueError):
        render(empty, front_pose, small_intr)


def test_unclamped_color_is_linear_in_sh(rng, small_intr, front_pose):
    s = random_scene(rng, 10)
    st = RenderSettings(clamp_color=False)
    a = render(s, front_pose, small_intr, st).color
    s2 = s.copy()
    s2.sh *= 2.0
    np.testing.assert_allclose(render(s2, front_pose, small_intr, st).color, 2.0 * a, atol=1e-12)
