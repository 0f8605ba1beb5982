"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"FTRJ"                     magic
    u32                         format version (currently 1)
    repeated until EOF:
        u32                     name length in bytes
        bytes                   UTF-8 name
        u32                     rank
        u64 * rank              dims
        f64 * prod(dims)        payload, row-major

Integer buffers (e.g. batch-norm counters) are stored as f64 and cast back
on load.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"FTRJ"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(tensors: Mapping[str, torch.Tensor], path) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    result: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            result[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return result


def save_module(module: torch.nn.Module, path) -> None:
    save_tensors(module.state_dict(), path)


def load_module(module: torch.nn.Module, path) -> torch.nn.Module:
    arrays = load_tensors(path)
    state = module.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    module.load_state_dict({k: torch.as_tensor(arrays[k]).to(state[k].dtype) for k in state})
    return module
