"""Dependency-free 8-bit PPM (P6) and PGM (P5) reading and writing."""

from __future__ import annotations

import numpy as np

__all__ = ["read_image", "write_ppm", "write_pgm"]


class ImageFormatError(ValueError):
    pass


def _read_header_tokens(blob: bytes, count: int, origin: str):
    """Return ``count`` whitespace-separated tokens after the magic, skipping comments."""
    pos = 2
    tokens = []
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{origin}: truncated header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1  # single whitespace byte separates header and payload


def read_image(path) -> np.ndarray:
    """Read a binary PPM/PGM; returns HxWx3 (P6) or HxW (P5) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} (want binary P5/P6)")
    tokens, offset = _read_header_tokens(blob, 3, str(path))
    width, height, maxval = (int(t) for t in tokens)
    if maxval > 255:
        raise ImageFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = blob[offset : offset + expected]
    if len(payload) != expected:
        raise ImageFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def write_ppm(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"write_ppm wants HxWx3, got {arr.shape}")
    arr = arr.astype(np.uint8, copy=False)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_pgm(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ImageFormatError(f"write_pgm wants HxW, got {arr.shape}")
    arr = arr.astype(np.uint8, copy=False)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
