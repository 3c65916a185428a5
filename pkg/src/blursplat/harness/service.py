"""HTTP service exposing an oracle prior over the JSON prior protocol.

Routes:
    GET  /v1/capabilities
    POST /v1/deblur   {"image": b64png, "pose": {"q": [...], "t": [...]}}
    POST /v1/repair   {"image": b64png, "reference": b64png, "t0": int, "pose": {...}}

Errors are JSON ``{"code", "message", "field"}``: 422 for malformed input,
504 when the model exceeds its deadline, 404 for unknown routes.
An optional ``?sigma=<float>`` query parameter adds pixel noise.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from ..camera import CameraIntrinsics
from ..imageio import ImageFormatError, b64_to_png, png_to_b64
from ..priors.providers import GroundTruthOracle, NoisyOracle, ProviderError, RepairRequest
from ..scene import GaussianScene

log = logging.getLogger(__name__)

MAX_BODY = 64 * 1024 * 1024


class FieldError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


def _number_list(body: dict, key: str, n: int, prefix: str) -> list[float]:
    v = body.get(key)
    path = f"{prefix}.{key}"
    if not isinstance(v, list) or len(v) != n:
        raise FieldError(path, f"expected a list of {n} numbers")
    for i, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise FieldError(f"{path}[{i}]", "expected a finite number")
    return [float(x) for x in v]


def parse_pose(body: dict, key: str = "pose") -> dict:
    """Validate a pose object and return it in wire form."""
    v = body.get(key)
    if v is None:
        raise FieldError(key, "missing")
    if not isinstance(v, dict):
        raise FieldError(key, "expected an object with q and t")
    q = _number_list(v, "q", 4, key)
    t = _number_list(v, "t", 3, key)
    if np.linalg.norm(q) < 1e-12:
        raise FieldError(f"{key}.q", "quaternion has zero norm")
    return {"q": q, "t": t}


def parse_image(body: dict, key: str) -> np.ndarray:
    v = body.get(key)
    if v is None:
        raise FieldError(key, "missing")
    if not isinstance(v, str):
        raise FieldError(key, "expected a base64-encoded PNG string")
    try:
        img = b64_to_png(v)
    except ImageFormatError as e:
        raise FieldError(key, str(e)) from None
    if img.ndim != 3 or img.shape[2] != 3:
        raise FieldError(key, f"expected an RGB image, got shape {img.shape}")
    return img


def parse_deblur(body) -> tuple[np.ndarray, dict]:
    if not isinstance(body, dict):
        raise FieldError("$", "expected a JSON object")
    return parse_image(body, "image"), parse_pose(body)


def parse_repair(body) -> tuple[RepairRequest, dict]:
    if not isinstance(body, dict):
        raise FieldError("$", "expected a JSON object")
    img = parse_image(body, "image")
    ref = parse_image(body, "reference")
    if ref.shape != img.shape:
        raise FieldError("reference", f"shape {ref.shape} does not match image {img.shape}")
    t0 = body.get("t0", 199)
    if isinstance(t0, bool) or not isinstance(t0, int) or t0 < 0:
        raise FieldError("t0", "expected a non-negative integer")
    wire = parse_pose(body)
    return RepairRequest(img, ref, t0), wire


@dataclass
class ServiceConfig:
    sigma: float = 0.0
    seed: int = 0
    deadline: float = 30.0
    latency: float = 0.0  # artificial model latency, for exercising the timeout path
    workers: int = 16


class OracleService:
    def __init__(self, scene: GaussianScene, intr: CameraIntrinsics, cfg: ServiceConfig | None = None):
        self.scene = scene
        self.intr = intr
        self.cfg = cfg or ServiceConfig()
        self.pool = ThreadPoolExecutor(max_workers=self.cfg.workers)
        self._providers: dict[float, GroundTruthOracle] = {}
        self._lock = threading.Lock()

    def provider(self, sigma: float) -> GroundTruthOracle:
        with self._lock:
            if sigma not in self._providers:
                self._providers[sigma] = (
                    NoisyOracle(self.scene, self.intr, sigma, self.cfg.seed) if sigma > 0
                    else GroundTruthOracle(self.scene, self.intr)
                )
            return self._providers[sigma]

    def run(self, fn):
        def job():
            if self.cfg.latency:
                time.sleep(self.cfg.latency)
            return fn()

        return self.pool.submit(job).result(timeout=self.cfg.deadline)


class _Handler(BaseHTTPRequestHandler):
    server_version = "PriorOracle/1"
    protocol_version = "HTTP/1.1"
    service: OracleService  # set on the subclass

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, code: str, message: str, field: str | None = None) -> None:
        body = {"code": code, "message": message}
        if field is not None:
            body["field"] = field
        self._send(status, body)

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/v1/capabilities":
            self._send(200, {"deblur": True, "repair": True, "features": False})
        else:
            self._error(404, "not_found", f"no route {url.path}")

    def do_POST(self):
        url = urlparse(self.path)
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self._error(413, "too_large", "request body too large")
            return
        raw = self.rfile.read(length)
        if url.path not in ("/v1/deblur", "/v1/repair"):
            self._error(404, "not_found", f"no route {url.path}")
            return
        try:
            sigma = float(parse_qs(url.query).get("sigma", [self.service.cfg.sigma])[0])
            if not math.isfinite(sigma) or sigma < 0:
                raise ValueError
        except ValueError:
            self._error(422, "invalid_request", "sigma must be a non-negative number", "?sigma")
            return
        try:
            body = json.loads(raw)
        except (ValueError, UnicodeDecodeError) as e:
            self._error(422, "invalid_request", f"body is not JSON: {e}", "$")
            return
        prov = self.service.provider(sigma)
        try:
            if url.path == "/v1/deblur":
                img, wire = parse_deblur(body)
                fn = lambda: prov.deblur_wire(img, wire)  # noqa: E731
            else:
                req, wire = parse_repair(body)
                fn = lambda: prov.repair_wire(req, wire)  # noqa: E731
            out = self.service.run(fn)
        except FieldError as e:
            self._error(422, "invalid_request", e.message, e.field)
            return
        except FutureTimeout:
            self._error(504, "timeout", f"model exceeded {self.service.cfg.deadline}s deadline")
            return
        except ProviderError as e:
            self._error(422, "unprocessable", str(e), "image")
            return
        self._send(200, {"image": png_to_b64(out)})


class OracleServer:
    """Threaded HTTP server; usable as a context manager that serves in the background."""

    def __init__(self, scene: GaussianScene, intr: CameraIntrinsics, host: str = "127.0.0.1", port: int = 0,
                 cfg: ServiceConfig | None = None):
        self.service = OracleService(scene, intr, cfg)
        handler = type("Handler", (_Handler,), {"service": self.service})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def start(self) -> OracleServer:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self.service.pool.shutdown(wait=False, cancel_futures=True)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_oracle(scene: GaussianScene, intr: CameraIntrinsics, host: str = "127.0.0.1", port: int = 8765,
                 cfg: ServiceConfig | None = None) -> OracleServer:
    return OracleServer(scene, intr, host, port, cfg)
