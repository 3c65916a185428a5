"""Image and depth I/O: 16-bit PNG for color, PFM for float data."""

from __future__ import annotations

import base64
from pathlib import Path

import cv2
import numpy as np

PNG_LEVELS = 65535


class ImageFormatError(ValueError):
    pass


def quantize16(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and snap to the 16-bit grid, so a PNG round trip is exact."""
    x = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    return np.round(x * PNG_LEVELS) / PNG_LEVELS


def _to_u16(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ImageFormatError(f"expected HxW or HxWx3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("image contains non-finite values")
    u = np.round(np.clip(img, 0.0, 1.0) * PNG_LEVELS).astype(np.uint16)
    return u[..., ::-1] if u.ndim == 3 else u  # cv2 is BGR


def encode_png(img: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(_to_u16(img)))
    if not ok:
        raise ImageFormatError("PNG encoding failed")
    return buf.tobytes()


def decode_png(data: bytes) -> np.ndarray:
    arr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageFormatError("payload is not a decodable PNG")
    scale = 255.0 if arr.dtype == np.uint8 else float(PNG_LEVELS)
    if arr.ndim == 3:
        arr = arr[..., 2::-1] if arr.shape[2] == 4 else arr[..., ::-1]
    return arr.astype(float) / scale


def png_to_b64(img: np.ndarray) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def b64_to_png(s: str) -> np.ndarray:
    try:
        raw = base64.b64decode(s, validate=True)
    except (ValueError, TypeError) as e:
        raise ImageFormatError(f"invalid base64: {e}") from None
    return decode_png(raw)


def write_png(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(img))


def read_png(path: str | Path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return decode_png(p.read_bytes())


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom-to-top per the format."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ImageFormatError(f"PFM needs HxW or HxWx3, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ImageFormatError(f"{path}: not a PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ImageFormatError(f"{path}: bad PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        endian = "<" if scale < 0 else ">"
        c = 3 if header == b"PF" else 1
        raw = np.frombuffer(f.read(), dtype=endian + "f4")
    if raw.size != w * h * c:
        raise ImageFormatError(f"{path}: truncated PFM payload")
    arr = raw.reshape((h, w, c) if c == 3 else (h, w))
    return np.flipud(arr).astype(np.float64)

