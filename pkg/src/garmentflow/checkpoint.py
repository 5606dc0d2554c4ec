"""Binary checkpoint format.

Layout, all integers unsigned 32-bit little-endian::

    b"UMCK" | version | tensor count
    per tensor: name length | name (utf-8) | rank | dims... | float32 LE data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .imageio import atomic_write_bytes

MAGIC = b"UMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).numpy()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode(data: bytes, source: str = "<bytes>") -> dict[str, torch.Tensor]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{source}: tensor name is not utf-8") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        if name in out:
            raise CheckpointError(f"{source}: duplicate tensor {name!r}")
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes")
    return out


def save(path, tensors: dict[str, torch.Tensor]) -> None:
    atomic_write_bytes(path, encode(tensors))


def load(path) -> dict[str, torch.Tensor]:
    return decode(Path(path).read_bytes(), str(path))


def save_model(path, model: torch.nn.Module) -> None:
    save(path, dict(model.named_parameters()))


def load_into(model: torch.nn.Module, path) -> None:
    """Copy checkpoint tensors into ``model``; names and shapes must match exactly."""
    tensors = load(path)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter table mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    with torch.no_grad():
        for name, p in params.items():
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, model expects {tuple(p.shape)}")
            p.copy_(t)
