"""Gaussian splatting from sparse, motion-blurred views.

Main entry points: :func:`blursplat.train.train`, the rasterizer in
:mod:`blursplat.splat`, exposure-blur synthesis in :mod:`blursplat.blur`,
prior providers in :mod:`blursplat.priors` and the ``blursplat`` CLI.
"""

from .blur import BlurLossWeights, ExposureSegment, blurry_loss, synthesize_blur, synthesize_blur_backward
from .camera import CameraIntrinsics
from .explore import ExplorationConfig, ViewBuffer, explore
from .lie import PoseSE3, Rotation, interpolate_pose, se3_exp, se3_log
from .metrics import psnr, ssim
from .scene import GaussianScene, SceneRecipe, generate_scene, load_scene, save_scene
from .splat import RenderSettings, available_backends, render, render_backward
from .train import Dataset, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BlurLossWeights",
    "CameraIntrinsics",
    "Dataset",
    "ExplorationConfig",
    "ExposureSegment",
    "GaussianScene",
    "PoseSE3",
    "RenderSettings",
    "Rotation",
    "SceneRecipe",
    "TrainConfig",
    "ViewBuffer",
    "available_backends",
    "blurry_loss",
    "explore",
    "generate_scene",
    "interpolate_pose",
    "load_scene",
    "psnr",
    "render",
    "render_backward",
    "save_scene",
    "se3_exp",
    "se3_log",
    "ssim",
    "synthesize_blur",
    "synthesize_blur_backward",
    "train",
]
