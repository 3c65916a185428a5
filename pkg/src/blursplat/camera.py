from __future__ import annotations

import math
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8 pixels")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float, near: float = 0.05, far: float = 100.0):
        fx = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(fx, fx, (width - 1) / 2, (height - 1) / 2, width, height, near, far)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> CameraIntrinsics:
        return cls(**d)
