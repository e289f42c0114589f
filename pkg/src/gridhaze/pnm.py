"""Binary portable pixmap (P6) and graymap (P5) reading and writing.

Samples are 8-bit (maxval 255) and map to [0, 1] as ``v / 255``; writing
quantizes with ``round(v * 255)`` after clamping.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .graph import Tensor


class ImageFormatError(ValueError):
    """Malformed or unsupported PNM payload."""


def _parse_header(buf: bytes, path) -> tuple[bytes, int, int, int]:
    pos = 0
    tokens = []
    if len(buf) < 2:
        raise ImageFormatError(f"{path}: file too short for a PNM header (offset 0)")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} at offset 0 (want P5 or P6)")
    pos = 2
    while len(tokens) < 3:
        if pos >= len(buf):
            raise ImageFormatError(f"{path}: header truncated at offset {pos}")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError(f"{path}: unterminated comment at offset {pos}")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            tokens.append((int(buf[start:pos]), start))
        else:
            raise ImageFormatError(f"{path}: unexpected byte {ch!r} in header at offset {pos}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after maxval at offset {pos}")
    pos += 1
    (w, _), (h, h_off), (maxval, m_off) = tokens
    if w < 1 or h < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {w}x{h} at offset {h_off}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} at offset {m_off} unsupported (need 255)")
    return magic, w, h, pos


def _read_payload(path, magic_wanted: bytes) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, w, h, pos = _parse_header(buf, path)
    if magic != magic_wanted:
        raise ImageFormatError(f"{path}: expected {magic_wanted.decode()} file, found {magic.decode()}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    actual = len(buf) - pos
    if actual < expected:
        raise ImageFormatError(
            f"{path}: truncated payload, expected {expected} bytes after header offset {pos}, got {actual}"
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=pos)
    return data.reshape(h, w, channels)


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write(path, magic: bytes, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(pixels).tobytes())
    os.replace(tmp, path)


def read_image(path) -> Tensor:
    """Read a P6 file as a (1, 3, h, w) float32 tensor in [0, 1]."""
    px = _read_payload(path, b"P6")
    data = px.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255.0)
    return Tensor(data)


def write_image(image, path) -> None:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"write_image takes a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_image needs (3, h, w) or (1, 3, h, w), got {arr.shape}")
    _write(path, b"P6", _quantize(arr).transpose(1, 2, 0))


def read_depth(path) -> np.ndarray:
    """Read a P5 depth map as an (h, w) float64 array in [0, 1]."""
    return _read_payload(path, b"P5")[:, :, 0].astype(np.float64) / 255.0


def write_depth(depth: np.ndarray, path) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be (h, w), got {depth.shape}")
    _write(path, b"P5", _quantize(depth))
