"""Prior providers: a deblurring model and a reference-conditioned repair model.

The engine talks to providers only through :class:`PriorProvider`. Outputs
are treated as constants by the losses. Every provider returns images on
the 16-bit grid used by the wire format, so in-process and remote results
can be compared bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from ..camera import CameraIntrinsics
from ..imageio import ImageFormatError, b64_to_png, png_to_b64, quantize16
from ..lie import PoseSE3, pose_distance
from ..scene import GaussianScene
from ..splat import RenderSettings, render

log = logging.getLogger(__name__)

DEFAULT_T0 = 199


class ProviderError(RuntimeError):
    """A provider could not produce an output."""

    retryable = False


class UnsupportedCapability(ProviderError):
    pass


class TransportError(ProviderError):
    """Network or timeout failure talking to a remote provider."""

    retryable = True


class RemoteRequestError(ProviderError):
    """The remote service rejected the request (4xx)."""

    def __init__(self, status: int, code: str, message: str, field: str | None = None):
        super().__init__(f"{status} {code}: {message}" + (f" (field {field})" if field else ""))
        self.status, self.code, self.field = status, code, field


@dataclass
class RepairRequest:
    image: np.ndarray
    reference: np.ndarray
    t0: int = DEFAULT_T0
    pose: PoseSE3 | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        self.reference = np.asarray(self.reference, dtype=float)
        if self.image.shape != self.reference.shape:
            raise ValueError(f"image and reference differ in shape: {self.image.shape} vs {self.reference.shape}")
        if int(self.t0) != self.t0 or self.t0 < 0:
            raise ValueError(f"t0 must be a non-negative integer, got {self.t0}")
        self.t0 = int(self.t0)


@runtime_checkable
class PriorProvider(Protocol):
    identity: str
    capabilities: frozenset

    def deblur(self, image: np.ndarray, pose: PoseSE3 | None = None) -> np.ndarray: ...

    def repair(self, req: RepairRequest) -> np.ndarray: ...


def deblur(provider: PriorProvider, blurry: np.ndarray, pose: PoseSE3 | None = None) -> np.ndarray:
    if "deblur" not in provider.capabilities:
        raise UnsupportedCapability(f"{provider.identity} cannot deblur")
    out = provider.deblur(blurry, pose)
    if out.shape != np.shape(blurry):
        raise ProviderError(f"{provider.identity} returned shape {out.shape}, expected {np.shape(blurry)}")
    return out


def repair(provider: PriorProvider, req: RepairRequest) -> np.ndarray:
    if "repair" not in provider.capabilities:
        raise UnsupportedCapability(f"{provider.identity} cannot repair")
    out = provider.repair(req)
    if out.shape != req.image.shape:
        raise ProviderError(f"{provider.identity} returned shape {out.shape}, expected {req.image.shape}")
    return out


def nearest_reference(pose: PoseSE3, poses: list[PoseSE3]) -> int:
    """Index of the pose closest to ``pose`` in geodesic distance (first wins on ties)."""
    if not poses:
        raise ValueError("no reference poses")
    d = [pose_distance(pose, p) for p in poses]
    return int(np.argmin(d))


def _wire(pose: PoseSE3 | None) -> dict | None:
    return None if pose is None else pose.to_json()


class GroundTruthOracle:
    """Renders the true scene: deblur at the declared midpoint pose, repair at the requested pose.

    Poses are rendered from their wire form (the JSON dict), so an in-process
    call and a call relayed by the HTTP service build the camera identically.
    """

    capabilities = frozenset({"deblur", "repair"})

    def __init__(self, scene: GaussianScene, intr: CameraIntrinsics, settings: RenderSettings | None = None):
        self.scene = scene
        self.intr = intr
        self.settings = settings or RenderSettings()
        self.identity = "oracle"

    def _render(self, wire: dict | None, shape) -> np.ndarray:
        if wire is None:
            raise ProviderError("oracle requests must declare a pose")
        if tuple(shape[:2]) != (self.intr.height, self.intr.width):
            raise ProviderError(f"image size {tuple(shape[:2])} does not match oracle camera {(self.intr.height, self.intr.width)}")
        return render(self.scene, PoseSE3.from_json(wire), self.intr, self.settings).color

    def _finish(self, clean: np.ndarray, kind: str, wire: dict | None) -> np.ndarray:
        return quantize16(clean)

    def deblur_wire(self, image, wire: dict | None) -> np.ndarray:
        return self._finish(self._render(wire, np.shape(image)), "deblur", wire)

    def repair_wire(self, req: RepairRequest, wire: dict | None) -> np.ndarray:
        return self._finish(self._render(wire, req.image.shape), "repair", wire)

    def deblur(self, image, pose=None):
        return self.deblur_wire(image, _wire(pose))

    def repair(self, req: RepairRequest):
        return self.repair_wire(req, _wire(req.pose))


def request_digest(kind: str, wire: dict | None, seed: int) -> int:
    payload = json.dumps({"kind": kind, "pose": wire, "seed": seed}, sort_keys=True)
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:8], "little")


class NoisyOracle(GroundTruthOracle):
    """Ground truth plus zero-mean Gaussian pixel noise, seeded by the request."""

    def __init__(self, scene, intr, sigma: float, seed: int = 0, settings: RenderSettings | None = None):
        super().__init__(scene, intr, settings)
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = float(sigma)
        self.seed = int(seed)
        self.identity = f"noisy:{self.sigma:g}"

    def _finish(self, clean, kind, wire):
        if self.sigma == 0:
            return quantize16(clean)
        rng = np.random.default_rng(request_digest(kind, wire, self.seed))
        return quantize16(clean + rng.normal(0.0, self.sigma, clean.shape))


@dataclass
class RemoteProvider:
    """Client for the JSON-over-HTTP prior protocol.

    Transport failures and 5xx answers are retried with exponential backoff.
    At most ``max_inflight`` requests run concurrently per client.
    """

    url: str
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.1
    max_inflight: int = 4
    identity: str = field(init=False)
    _sem: threading.BoundedSemaphore = field(init=False, repr=False)
    _caps: frozenset | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self.url = self.url.rstrip("/")
        self.identity = f"remote:{self.url}"
        self._sem = threading.BoundedSemaphore(self.max_inflight)

    @property
    def capabilities(self) -> frozenset:
        if self._caps is None:
            body = self._call("GET", "/v1/capabilities")
            self._caps = frozenset(k for k in ("deblur", "repair", "features") if body.get(k))
        return self._caps

    def _call(self, method: str, route: str, payload: dict | None = None) -> dict:
        import requests

        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._sem:
                    r = requests.request(method, self.url + route, json=payload, timeout=self.timeout)
            except requests.RequestException as e:
                last = TransportError(f"{method} {route}: {e}")
                log.warning("transport failure on attempt %d: %s", attempt + 1, e)
                continue
            if r.status_code >= 500:
                last = TransportError(f"{method} {route}: HTTP {r.status_code}")
                log.warning("server error on attempt %d: %s", attempt + 1, r.status_code)
                continue
            try:
                body = r.json()
            except ValueError:
                raise ProviderError(f"{method} {route}: response is not JSON") from None
            if r.status_code >= 400:
                raise RemoteRequestError(r.status_code, body.get("code", "error"), body.get("message", ""), body.get("field"))
            return body
        assert last is not None
        raise last

    def _image(self, body: dict) -> np.ndarray:
        try:
            return b64_to_png(body["image"])
        except (KeyError, TypeError, ImageFormatError) as e:
            raise ProviderError(f"malformed provider response: {e}") from None

    def deblur(self, image, pose=None):
        payload = {"image": png_to_b64(image)}
        if pose is not None:
            payload["pose"] = pose.to_json()
        return self._image(self._call("POST", "/v1/deblur", payload))

    def repair(self, req: RepairRequest):
        payload = {"image": png_to_b64(req.image), "reference": png_to_b64(req.reference), "t0": req.t0}
        if req.pose is not None:
            payload["pose"] = req.pose.to_json()
        return self._image(self._call("POST", "/v1/repair", payload))


def make_provider(spec: str, scene: GaussianScene | None = None, intr: CameraIntrinsics | None = None, seed: int = 0):
    """Build a provider from ``oracle``, ``noisy:<sigma>`` or ``remote:<url>``."""
    if spec.startswith("remote:"):
        return RemoteProvider(spec[len("remote:"):])
    if scene is None or intr is None:
        raise ValueError(f"provider {spec!r} needs a ground-truth scene and intrinsics")
    if spec == "oracle":
        return GroundTruthOracle(scene, intr)
    if spec.startswith("noisy:"):
        try:
            sigma = float(spec[len("noisy:"):])
        except ValueError:
            raise ValueError(f"bad noise level in provider spec {spec!r}") from None
        return NoisyOracle(scene, intr, sigma, seed)
    raise ValueError(f"unknown provider spec {spec!r}")
