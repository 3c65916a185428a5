"""Held-out evaluation of a training run directory, plus the component ablation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from ..metrics import psnr, ssim
from ..scene import GaussianScene, SceneFormatError, load_scene
from ..splat import RenderSettings, render
from ..train import Dataset, TrainConfig, train
from .spectrum import radial_spectrum

# the four configurations of the component ablation, cumulative
ABLATION_STAGES: dict[str, dict] = {
    "baseline": dict(lambda_pr=0.0, lambda_geo=0.0, lambda_reg=0.0),
    "+geo": dict(lambda_pr=0.0, lambda_reg=0.0),
    "+deblur": dict(lambda_reg=0.0),
    "+depth": {},
}


# desk-scale schedule: the reference 7000/1500/200 schedule compressed to fit a 32x32 benchmark
DESK_TRAIN = dict(total_iters=1500, warmup_iters=300, gen_interval=42, prune_interval=100,
                  eval_interval=1500, pose_warmup=300)


def desk_train_config(**overrides) -> TrainConfig:
    return TrainConfig.from_dict({**DESK_TRAIN, **overrides})


class MissingCheckpoint(FileNotFoundError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("blursplat").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_report(report: dict, name: str = "eval_report") -> None:
    jsonschema.validate(report, load_schema(name))


def _mean_profile(profiles) -> list[float]:
    return [float(v) for v in np.mean([p.radial_power for p in profiles], axis=0)]


def evaluate_scene(scene: GaussianScene, ds: Dataset, run: str = "", config_hash: str = "",
                   settings: RenderSettings | None = None) -> dict:
    """Per-view and mean PSNR/SSIM on the held-out views, with spectra of renders and ground truth."""
    if not ds.test_ids:
        raise ValueError("dataset has no held-out views")
    views, sp_r, sp_g = [], [], []
    for i, T, gt in zip(ds.test_ids, ds.test_poses, ds.test_images):
        img = render(scene, T, ds.intr, settings).color
        a, b = radial_spectrum(img), radial_spectrum(gt)
        sp_r.append(a)
        sp_g.append(b)
        views.append({
            "index": int(i),
            "psnr": psnr(img, gt),
            "ssim": float(ssim(img, gt)[0]),
            "hf_ratio_render": a.hf_ratio,
            "hf_ratio_gt": b.hf_ratio,
        })
    return {
        "config_hash": config_hash,
        "run": run,
        "views": views,
        "mean": {"psnr": float(np.mean([v["psnr"] for v in views])), "ssim": float(np.mean([v["ssim"] for v in views]))},
        "spectrum": {
            "render_radial_power": _mean_profile(sp_r),
            "gt_radial_power": _mean_profile(sp_g),
            "hf_ratio_render": float(np.mean([p.hf_ratio for p in sp_r])),
            "hf_ratio_gt": float(np.mean([p.hf_ratio for p in sp_g])),
        },
    }


def eval_run(run_dir: str | Path, ds: Dataset, settings: RenderSettings | None = None) -> dict:
    run_dir = Path(run_dir)
    path = run_dir / "scene.json"
    if not path.exists():
        raise MissingCheckpoint(f"no scene checkpoint at {path}")
    try:
        scene = load_scene(path)
    except SceneFormatError as e:
        raise MissingCheckpoint(f"unreadable scene checkpoint at {path}: {e}") from e
    cfg_hash = ""
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        cfg_hash = json.loads(cfg_path.read_text()).get("config_hash", "")
    report = evaluate_scene(scene, ds, str(run_dir), cfg_hash, settings)
    validate_report(report)
    return report


def format_report(report: dict) -> str:
    lines = [f"run: {report['run'] or '-'}  config: {report['config_hash'] or '-'}",
             f"{'view':>6} {'PSNR':>8} {'SSIM':>7} {'HF':>7} {'HF gt':>7}"]
    for v in report["views"]:
        lines.append(f"{v['index']:>6} {v['psnr']:>8.2f} {v['ssim']:>7.4f} {v['hf_ratio_render']:>7.4f} {v['hf_ratio_gt']:>7.4f}")
    m = report["mean"]
    lines.append(f"{'mean':>6} {m['psnr']:>8.2f} {m['ssim']:>7.4f} "
                 f"{report['spectrum']['hf_ratio_render']:>7.4f} {report['spectrum']['hf_ratio_gt']:>7.4f}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------


@dataclass
class AblationRun:
    stage: str
    seed: int
    report: dict
    metrics_csv: bytes | None = None


def run_ablation(ds: Dataset, base: TrainConfig, provider, seeds=(0, 1, 2), stages=None,
                 out_dir: str | Path | None = None, settings: RenderSettings | None = None,
                 log=None) -> tuple[dict, list[AblationRun]]:
    stages = list(stages or ABLATION_STAGES)
    runs: list[AblationRun] = []
    for stage in stages:
        for seed in seeds:
            cfg = TrainConfig.from_dict({**base.to_dict(), **ABLATION_STAGES[stage], "seed": seed})
            d = None if out_dir is None else Path(out_dir) / f"{stage.lstrip('+')}_s{seed}"
            res = train(ds, cfg, provider, out_dir=d, settings=settings)
            rep = evaluate_scene(res.scene, ds, str(d or ""), cfg.digest(), settings)
            csv_bytes = (d / "metrics.csv").read_bytes() if d is not None else None
            runs.append(AblationRun(stage, seed, rep, csv_bytes))
            if log:
                log(f"{stage:>8} seed {seed}: {rep['mean']['psnr']:.2f} dB")
    rows = []
    for stage in stages:
        rs = [r.report for r in runs if r.stage == stage]
        rows.append({
            "stage": stage,
            "psnr": float(np.mean([r["mean"]["psnr"] for r in rs])),
            "ssim": float(np.mean([r["mean"]["ssim"] for r in rs])),
            "hf_ratio": float(np.mean([r["spectrum"]["hf_ratio_render"] for r in rs])),
            "per_seed_psnr": [r["mean"]["psnr"] for r in rs],
        })
    h = hashlib.sha256(json.dumps({"base": base.to_dict(), "seeds": list(seeds), "stages": stages},
                                  sort_keys=True).encode()).hexdigest()[:16]
    report = {
        "config_hash": h,
        "stages": stages,
        "seeds": [int(s) for s in seeds],
        "rows": rows,
        "gt_hf_ratio": runs[0].report["spectrum"]["hf_ratio_gt"] if runs else 0.0,
    }
    validate_report(report, "ablation_report")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(report, indent=1))
        (Path(out_dir) / "ablation.txt").write_text(format_ablation(report) + "\n")
    return report, runs


def format_ablation(report: dict) -> str:
    lines = [f"{'stage':>9} {'PSNR':>8} {'SSIM':>7} {'HF':>7}   per-seed PSNR"]
    for r in report["rows"]:
        seeds = " ".join(f"{p:.2f}" for p in r["per_seed_psnr"])
        lines.append(f"{r['stage']:>9} {r['psnr']:>8.2f} {r['ssim']:>7.4f} {r['hf_ratio']:>7.4f}   {seeds}")
    lines.append(f"{'gt':>9} {'':>8} {'':>7} {report.get('gt_hf_ratio', 0.0):>7.4f}")
    return "\n".join(lines)
