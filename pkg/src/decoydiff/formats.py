"""On-disk formats: TNSR tensor container, ASCII PPM/PGM images.

TNSR layout: magic "TNSR", u8 version=1, u32 rank, u32 dims[rank], then a
little-endian float32 payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"TNSR"
_VERSION = 1


def write_tnsr(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_tnsr(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a TNSR file")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported TNSR version {version}")
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload")
        extra = f.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def _read_pnm_tokens(path, magic: str):
    tokens = []
    with open(path, "rb") as f:
        text = f.read().decode("ascii")
    for line in text.split("\n"):
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic} header")
    return tokens[1:]


def write_ppm(path, img: np.ndarray) -> None:
    """Write an (h, w, 3) float image in [0, 1] as ASCII PPM (P3, 0-255)."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"ppm image must be (h, w, 3), got {img.shape}")
    h, w, _ = img.shape
    vals = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.int64)
    lines = [f"P3\n{w} {h}\n255"]
    for row in vals.reshape(h, w * 3):
        lines.append(" ".join(str(v) for v in row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def read_ppm(path) -> np.ndarray:
    tokens = _read_pnm_tokens(path, "P3")
    w, h, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
    vals = np.array(tokens[3:], dtype=np.float32)
    if vals.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} samples, got {vals.size}")
    return (vals / maxval).reshape(h, w, 3).astype(np.float32)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (h, w) array of 0-255 ints (or a 0/1 mask) as ASCII PGM (P2)."""
    if gray.ndim != 2:
        raise ValueError(f"pgm image must be 2-D, got {gray.shape}")
    arr = np.asarray(gray)
    if arr.dtype.kind == "f" or arr.max(initial=0) <= 1:
        arr = np.rint(np.clip(arr, 0, 1) * 255).astype(np.int64)
    else:
        arr = np.clip(arr.astype(np.int64), 0, 255)
    h, w = arr.shape
    lines = [f"P2\n{w} {h}\n255"]
    for row in arr:
        lines.append(" ".join(str(v) for v in row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def read_pgm(path) -> np.ndarray:
    tokens = _read_pnm_tokens(path, "P2")
    w, h, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
    vals = np.array(tokens[3:], dtype=np.float32)
    if vals.size != w * h:
        raise ValueError(f"{path}: expected {w * h} samples, got {vals.size}")
    return (vals / maxval).reshape(h, w).astype(np.float32)


def read_mask(path) -> np.ndarray:
    """Read a PGM as a binary keep-mask (threshold at half range)."""
    return (read_pgm(path) >= 0.5).astype(np.float32)
