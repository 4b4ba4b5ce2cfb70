"""Binary checkpoint format.

Layout, all integers little-endian::

    b"SDN1"                      magic
    u32                          tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8 ndim, ndim x u32 dims
        float32 data, row-major

Optimizer state rides along as extra tensors named ``__optim__.m.<param>``,
``__optim__.v.<param>`` and ``__optim__.t`` (step counter, shape ``(1,)``).
"""
from __future__ import annotations

import os
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .model import ParamStore
from .tensor import Tensor

MAGIC = b"SDN1"
OPTIM_PREFIX = "__optim__."


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not UTF-8 at offset {pos}") from exc
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(params: Mapping[str, Tensor], path, optim=None) -> None:
    """Write params (and optionally Adam state) atomically to ``path``."""
    tensors = {name: t.data for name, t in params.items()}
    if optim is not None:
        for name, arr in optim.state_arrays().items():
            tensors[OPTIM_PREFIX + name] = arr
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParamStore, dict[str, np.ndarray]]:
    """Return the parameter store and the (possibly empty) optimizer arrays."""
    tensors = decode(Path(path).read_bytes())
    params = ParamStore()
    optim: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith(OPTIM_PREFIX):
            optim[name[len(OPTIM_PREFIX):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return params, optim
