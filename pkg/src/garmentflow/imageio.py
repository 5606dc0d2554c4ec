"""Binary PPM (P6) / PGM (P5) read and write, 8-bit, no comments."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def to_u8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def encode_ppm(img) -> bytes:
    img = to_u8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs H x W x 3, got {img.shape}")
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def encode_pgm(img) -> bytes:
    img = to_u8(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs H x W, got {img.shape}")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def write_ppm(path, img) -> None:
    atomic_write_bytes(path, encode_ppm(img))


def write_pgm(path, img) -> None:
    atomic_write_bytes(path, encode_pgm(img))


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    # magic, width, height, maxval separated by single whitespace bytes
    while len(fields) < 4:
        end = pos
        while end < len(data) and data[end : end + 1] not in (b" ", b"\n", b"\t", b"\r"):
            end += 1
        if end == len(data):
            raise ValueError(f"{path}: truncated header")
        fields.append(data[pos:end])
        pos = end + 1
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic!r}, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported")
    body = data[pos:]
    if len(body) != w * h * channels:
        raise ValueError(f"{path}: expected {w * h * channels} pixel bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    """H x W x 3 uint8."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)
