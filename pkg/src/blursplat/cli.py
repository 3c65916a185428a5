"""Command-line entry point: ``blursplat <subcommand> ...``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .imageio import ImageFormatError, read_png, write_pfm, write_png
from .lie import PoseSE3
from .priors.providers import ProviderError
from .scene import LAYOUTS, COLOR_SCHEMES, SceneFormatError, SceneRecipe, generate_scene, load_scene, save_scene

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PROVIDER = 0, 2, 3, 4

log = logging.getLogger("blursplat")


class CliConfigError(ValueError):
    pass


class CliDataError(RuntimeError):
    pass


def config_hash(args: argparse.Namespace) -> str:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _read_json(path: str | Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliConfigError(f"{what} is not valid JSON ({path}): {e}") from None


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _load_benchmark(path):
    from .harness.benchmark import BenchmarkError, load_benchmark

    try:
        return load_benchmark(path)
    except (BenchmarkError, SceneFormatError, ImageFormatError, KeyError) as e:
        raise CliDataError(f"cannot load dataset {path}: {e}") from None


def _train_config(args):
    from .train import ConfigError, TrainConfig

    d = _read_json(args.config, "train config") if args.config else {}
    d.pop("config_hash", None)
    d["seed"] = args.seed
    for kv in args.set or []:
        k, _, v = kv.partition("=")
        if not _:
            raise CliConfigError(f"--set expects key=value, got {kv!r}")
        try:
            d[k] = json.loads(v)
        except json.JSONDecodeError:
            d[k] = v
    try:
        return TrainConfig.from_dict(d)
    except ConfigError as e:
        raise CliConfigError(str(e)) from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    try:
        recipe = SceneRecipe(args.seed, args.count, args.layout, args.colors, args.sh_degree)
        scene = generate_scene(recipe)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    scene.meta["config_hash"] = args.config_hash
    save_scene(scene, args.out)
    print(f"wrote {len(scene)} Gaussians to {args.out}")
    return EXIT_OK


def _parse_pose(text: str) -> PoseSE3:
    p = Path(text)
    d = _read_json(p, "pose file") if p.suffix == ".json" else None
    if d is None:
        try:
            d = json.loads(text)
        except json.JSONDecodeError:
            raise CliConfigError("--pose must be a JSON object {\"q\": [w,x,y,z], \"t\": [x,y,z]} or a .json file") from None
    try:
        return PoseSE3.from_json(d)
    except (KeyError, TypeError, ValueError) as e:
        raise CliConfigError(f"bad pose: {e}") from None


def cmd_render(args) -> int:
    from .splat import render

    try:
        scene = load_scene(args.scene)
    except (FileNotFoundError, SceneFormatError) as e:
        raise CliDataError(f"cannot load scene: {e}") from None
    intr = CameraIntrinsics.from_fov(args.width, args.height, args.fov)
    out = render(scene, _parse_pose(args.pose), intr)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_png(prefix.with_suffix(".png"), out.color)
    write_pfm(prefix.with_suffix(".pfm"), out.color)
    write_pfm(prefix.with_name(prefix.name + "_depth.pfm"), out.depth)
    _write_json(prefix.with_name(prefix.name + "_meta.json"), {"config_hash": args.config_hash, **out.stats})
    print(f"wrote {prefix.with_suffix('.png')}")
    return EXIT_OK


def cmd_blur_dataset(args) -> int:
    from .harness.benchmark import BenchmarkError, BenchmarkSpec, build_benchmark, save_benchmark

    d = _read_json(args.config, "benchmark config") if args.config else {}
    d["seed"] = args.seed
    for key in ("trajectory", "amplitude", "n_frames"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.size is not None:
        d["width"] = d["height"] = args.size
    if args.scene_seed is not None or args.count is not None:
        r = d.get("recipe", {})
        if args.scene_seed is not None:
            r["seed"] = args.scene_seed
        if args.count is not None:
            r["count"] = args.count
        d["recipe"] = {**SceneRecipe(seed=1, count=300, layout="cluster-field").__dict__, **r}
    try:
        spec = BenchmarkSpec.from_dict(d)
    except (BenchmarkError, TypeError, ValueError) as e:
        raise CliConfigError(str(e)) from None
    root = save_benchmark(build_benchmark(spec), args.out)
    print(f"wrote {spec.n_frames} frames to {root} (benchmark hash {spec.digest()})")
    return EXIT_OK


def _provider(spec: str, bench, seed: int):
    from .priors.providers import make_provider

    try:
        return make_provider(spec, bench.scene, bench.intr, seed)
    except ValueError as e:
        raise CliConfigError(str(e)) from None


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args)
    bench = _load_benchmark(args.dataset)
    try:
        ds = bench.dataset(args.views)
    except ValueError as e:
        raise CliConfigError(str(e)) from None
    res = train(ds, cfg, _provider(args.provider, bench, args.seed), out_dir=args.out)
    print(f"config hash {cfg.digest()}; held-out PSNR {res.heldout_psnr:.2f} dB, SSIM {res.heldout_ssim:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness.evaluate import MissingCheckpoint, eval_run, format_ablation, format_report, run_ablation

    bench = _load_benchmark(args.dataset)
    ds = bench.dataset(args.views)
    if args.ablation:
        cfg = _train_config(args)
        seeds = [args.seed + i for i in range(args.seeds)]
        report, _ = run_ablation(ds, cfg, _provider(args.provider, bench, args.seed), seeds=seeds,
                                 out_dir=args.out, log=print)
        print(format_ablation(report))
        return EXIT_OK
    if not args.run:
        raise CliConfigError("eval needs --run (or --ablation)")
    try:
        report = eval_run(args.run, ds)
    except MissingCheckpoint as e:
        raise CliDataError(str(e)) from None
    out = Path(args.out) if args.out else Path(args.run)
    _write_json(out / "eval.json", report)
    (out / "eval.txt").write_text(format_report(report) + "\n")
    print(format_report(report))
    return EXIT_OK


def cmd_explore(args) -> int:
    from .explore import ExplorationSkipped, ViewBuffer, explore
    from .lie import interpolate_pose
    from .priors.providers import deblur

    bench = _load_benchmark(args.dataset)
    ds = bench.dataset(args.views)
    cfg = _train_config(args).exploration()
    run = Path(args.run)
    try:
        scene = load_scene(run / "scene.json")
        frames = _read_json(run / "poses.json", "poses file")["frames"]
    except (FileNotFoundError, SceneFormatError) as e:
        raise CliDataError(f"cannot load run: {e}") from None
    except KeyError:
        raise CliDataError("poses.json has no frames") from None
    mids = [interpolate_pose(PoseSE3.from_json(f["start"]), PoseSE3.from_json(f["end"]), 0.5) for f in frames]
    prov = _provider(args.provider, bench, args.seed)
    refs = [(m, deblur(prov, b, p)) for m, b, p in zip(mids, ds.blurry, ds.prior_poses)]
    try:
        res = explore(scene, prov, ViewBuffer(list(mids)), refs, bench.intr, cfg)
    except ExplorationSkipped as e:
        raise ProviderError(str(e)) from None
    trace = {"config_hash": args.config_hash, **res.trace()}
    out = Path(args.out) if args.out else run / "explore.json"
    _write_json(out, trace)
    print(f"baseline {res.baseline:.2f} dB; {len(res.scored)} candidates, {len(res.accepted)} accepted -> {out}")
    return EXIT_OK


def cmd_fft(args) -> int:
    from .harness.spectrum import radial_spectrum

    try:
        img = read_png(args.image)
    except (FileNotFoundError, ImageFormatError) as e:
        raise CliDataError(f"cannot read image: {e}") from None
    prof = radial_spectrum(img)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".spectrum.json")
    _write_json(out, {"config_hash": args.config_hash, **prof.to_json()})
    write_pfm(out.with_suffix(".pfm"), prof.log_magnitude)
    print(f"high-frequency ratio {prof.hf_ratio:.4f} -> {out}")
    return EXIT_OK


def cmd_serve_oracle(args) -> int:
    from .harness.service import ServiceConfig, serve_oracle

    try:
        scene = load_scene(args.scene)
    except (FileNotFoundError, SceneFormatError) as e:
        raise CliDataError(f"cannot load scene: {e}") from None
    intr = CameraIntrinsics.from_fov(args.width, args.height, args.fov)
    cfg = ServiceConfig(sigma=args.sigma, seed=args.seed, deadline=args.deadline, latency=args.latency)
    server = serve_oracle(scene, intr, args.host, args.port, cfg)
    print(f"serving oracle priors on {server.url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (printed and embedded in artifacts)")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one TrainConfig field")
    p.add_argument("--provider", default="oracle", help="oracle | noisy:SIGMA | remote:URL")
    p.add_argument("--dataset", required=True, help="dataset directory from blur-dataset")
    p.add_argument("--views", type=int, default=3, choices=(3, 6, 9))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blursplat", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic Gaussian scene")
    _common(p)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--layout", default="textured-wall", choices=LAYOUTS)
    p.add_argument("--colors", default="vivid", choices=COLOR_SCHEMES)
    p.add_argument("--sh-degree", type=int, default=1, choices=(0, 1))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("render", help="render a scene from one pose (PNG + PFM, depth PFM)")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--pose", required=True, help='JSON {"q": [w,x,y,z], "t": [x,y,z]} or a .json file')
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("blur-dataset", help="build the synthetic blurry benchmark")
    _common(p)
    p.add_argument("--config", help="JSON file with BenchmarkSpec fields")
    p.add_argument("--trajectory", choices=("arc", "shake", "dolly"))
    p.add_argument("--amplitude", type=float)
    p.add_argument("--n-frames", dest="n_frames", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--scene-seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_blur_dataset)

    p = sub.add_parser("train", help="jointly optimize scene and exposure segments")
    _common(p)
    _train_opts(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run on held-out views, or run the component ablation")
    _common(p)
    _train_opts(p)
    p.add_argument("--run")
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--seeds", type=int, default=3, help="ablation: number of seeds starting at --seed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explore", help="run one exploration round on a trained run")
    _common(p)
    _train_opts(p)
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("fft", help="radial power spectrum of an image")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fft)

    p = sub.add_parser("serve-oracle", help="serve ground-truth priors over HTTP")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--latency", type=float, default=0.0)
    p.add_argument("--deadline", type=float, default=30.0)
    p.set_defaults(func=cmd_serve_oracle)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed % 2**32)
    args.config_hash = config_hash(args)
    print(f"seed: {args.seed}")
    print(f"config hash: {args.config_hash}")
    from .harness.benchmark import BenchmarkError
    from .train import ConfigError

    try:
        return args.func(args)
    except (CliConfigError, ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as e:
        print(f"provider error: {e}", file=sys.stderr)
        return EXIT_PROVIDER
    except (CliDataError, BenchmarkError, SceneFormatError, ImageFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
