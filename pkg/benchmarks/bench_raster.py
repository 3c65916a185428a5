"""Forward/backward timing of the compiled and pure-Python compositing backends.

    python benchmarks/bench_raster.py [--sizes 32 64] [--counts 100 300] [--repeat 5]

Also checks that both backends agree on every timed case.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from blursplat.camera import CameraIntrinsics
from blursplat.lie import PoseSE3, Rotation
from blursplat.scene import SceneRecipe, generate_scene
from blursplat.splat import RenderSettings, available_backends, render, render_backward


def timeit(fn, repeat: int) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None) -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64])
    ap.add_argument("--counts", type=int, nargs="+", default=[100, 300])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(f"seed: {args.seed}; backends: {', '.join(available_backends())}")
    pose = PoseSE3(Rotation(), np.array([0.0, 0.0, -2.5]))
    print(f"{'size':>5} {'N':>5} {'backend':>9} {'fwd ms':>9} {'bwd ms':>9} {'speedup':>8}")
    for n in args.counts:
        scene = generate_scene(SceneRecipe(seed=args.seed, count=n, layout="cluster-field"))
        for size in args.sizes:
            intr = CameraIntrinsics.from_fov(size, size, 50)
            g = np.random.default_rng(args.seed).normal(size=(size, size, 3))
            times, outs = {}, {}
            for b in available_backends():
                s = RenderSettings(backend=b)
                o = render(scene, pose, intr, s)
                outs[b] = (o.color, render_backward(scene, pose, intr, g, settings=s, output=o).means)
                times[b] = (
                    timeit(lambda: render(scene, pose, intr, s), args.repeat),
                    timeit(lambda: render_backward(scene, pose, intr, g, settings=s, output=o), args.repeat),
                )
            if len(outs) == 2:
                (c1, m1), (c2, m2) = outs.values()
                assert np.allclose(c1, c2, atol=1e-12) and np.allclose(m1, m2, rtol=1e-9, atol=1e-12), "backends disagree"
            ref = times.get("python")
            for b, (f, bw) in times.items():
                sp = f"{(ref[0] + ref[1]) / (f + bw):7.1f}x" if ref else "-"
                print(f"{size:>5} {n:>5} {b:>9} {f * 1e3:>9.2f} {bw * 1e3:>9.2f} {sp:>8}")


if __name__ == "__main__":
    main()
