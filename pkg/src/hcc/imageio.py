"""Image file I/O: binary PPM (P6) always, 8-bit RGB PNG when Pillow exists.

Pixels cross this boundary as (3, H, W) float64 in [0, 1]; 8-bit values map
in via /maxval and out via round-half-away at maxval 255.
"""

from __future__ import annotations

import os

import numpy as np

from . import functional as F
from .errors import CodecError

__all__ = [
    "read_ppm",
    "write_ppm",
    "read_image",
    "write_image",
    "to_uint8",
    "from_uint8",
]


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding half away from zero."""
    arr = np.asarray(img, dtype=np.float64)
    q = F.round_half_away(np.clip(arr, 0.0, 1.0) * 255.0)
    return q.astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def _ppm_tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    """Next whitespace-separated header tokens, skipping # comments."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise CodecError("truncated PPM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_ppm(data: bytes) -> np.ndarray:
    """Parse a binary P6 PPM into a (3, H, W) float64 image in [0, 1]."""
    if data[:2] != b"P6":
        raise CodecError("not a P6 PPM file")
    tokens, pos = _ppm_tokens(data, 3, 2)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise CodecError(f"bad PPM header field: {e}") from e
    if w < 1 or h < 1:
        raise CodecError(f"bad PPM size {w}x{h}")
    if not 1 <= maxval <= 255:
        raise CodecError(f"PPM maxval {maxval} outside [1, 255]")
    pos += 1
    need = 3 * w * h
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise CodecError(f"PPM pixel data truncated: {len(raw)} of {need} bytes")
    pix = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(img: np.ndarray) -> bytes:
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise CodecError(f"expected a (3, H, W) image, got {arr.shape}")
    _, h, w = arr.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + arr.transpose(1, 2, 0).tobytes()


def _read_png(path: str) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as e:
        raise CodecError("PNG support needs the Pillow extra (pip install hcc[png])") from e
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def _write_png(path: str, img: np.ndarray) -> None:
    try:
        from PIL import Image
    except ImportError as e:
        raise CodecError("PNG support needs the Pillow extra (pip install hcc[png])") from e
    arr = to_uint8(img)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def read_image(path: str) -> np.ndarray:
    """Load a PPM or PNG file as a (3, H, W) float64 image in [0, 1]."""
    with open(path, "rb") as f:
        head = f.read(8)
    if head[:2] == b"P6":
        with open(path, "rb") as f:
            return read_ppm(f.read())
    if head == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise CodecError(f"unsupported image format in {os.path.basename(path)}")


def write_image(path: str, img: np.ndarray) -> None:
    """Write PPM or PNG depending on the file extension (default PPM)."""
    if path.lower().endswith(".png"):
        _write_png(path, img)
        return
    with open(path, "wb") as f:
        f.write(write_ppm(img))
