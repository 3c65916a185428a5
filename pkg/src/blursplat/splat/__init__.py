"""Differentiable Gaussian splatting: projection, compositing, gradients."""

from .render import (
    DEFAULT_BACKEND,
    Projection,
    RenderGradients,
    RenderOutput,
    RenderSettings,
    available_backends,
    project,
    project_scene,
    render,
    render_backward,
)

__all__ = [
    "DEFAULT_BACKEND",
    "Projection",
    "RenderGradients",
    "RenderOutput",
    "RenderSettings",
    "available_backends",
    "project",
    "project_scene",
    "render",
    "render_backward",
]
