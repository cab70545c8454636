"""Flat binary tensor container and the named-tensor checkpoint archive.

Container layout: magic ``VLT1``, rank as little-endian u32, dims as
little-endian u32 each, then the row-major little-endian f32 payload.
A checkpoint is a directory of containers plus ``manifest.txt`` listing
``tensor <name> <file> <dims>`` entries and ``meta <key> <value>`` lines.
"""

from __future__ import annotations

import os
import struct

import numpy as np

__all__ = [
    "TensorFormatError",
    "save_tensor",
    "load_tensor",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"VLT1"


class TensorFormatError(ValueError):
    """Container bytes do not match the VLT1 layout."""


def tensor_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes()
    return header + payload


def tensor_from_bytes(blob: bytes, origin: str = "<bytes>") -> np.ndarray:
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"{origin}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise TensorFormatError(f"{origin}: truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise TensorFormatError(f"{origin}: truncated dims (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims)) if rank else 1
    expected = dims_end + 4 * count
    if len(blob) != expected:
        raise TensorFormatError(f"{origin}: payload is {len(blob) - dims_end} bytes, expected {4 * count}")
    flat = np.frombuffer(blob, dtype="<f4", offset=dims_end, count=count)
    return flat.astype(np.float32).reshape(dims)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return tensor_from_bytes(blob, origin=str(path))


def save_checkpoint(directory, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays and metadata; names may contain dots but not whitespace."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for key, value in sorted((meta or {}).items()):
        text = str(value)
        if any(ch.isspace() for ch in str(key)) or "\n" in text:
            raise ValueError(f"meta entry {key!r} contains whitespace")
        lines.append(f"meta {key} {text}")
    for idx, (name, array) in enumerate(sorted(tensors.items())):
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        fname = f"t{idx:04d}.vlt"
        arr = np.asarray(array)
        save_tensor(os.path.join(directory, fname), arr)
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {fname} {dims}")
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(directory):
    """Return (tensors, meta) from a checkpoint directory."""
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.txt under {directory}")
    tensors: dict = {}
    meta: dict = {}
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            kind, _, rest = line.partition(" ")
            if kind == "meta":
                key, _, value = rest.partition(" ")
                meta[key] = value
            elif kind == "tensor":
                parts = rest.split(" ")
                if len(parts) != 3:
                    raise TensorFormatError(f"{manifest}:{lineno}: malformed tensor entry {line!r}")
                name, fname, dims = parts
                arr = load_tensor(os.path.join(directory, fname))
                expect = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
                if dims != expect:
                    raise TensorFormatError(f"{manifest}:{lineno}: dims {dims} disagree with payload {expect}")
                tensors[name] = arr
            else:
                raise TensorFormatError(f"{manifest}:{lineno}: unknown entry kind {kind!r}")
    return tensors, meta
