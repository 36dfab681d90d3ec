"""Flat binary checkpoint layout.

All integers are little-endian.

==========  =====================================================
field       encoding
==========  =====================================================
magic       4 bytes ``HSTV``
version     u32
config      u32 byte length, then UTF-8 JSON (sorted keys)
n_tensors   u32
table       per tensor: u16 name length, UTF-8 name, u8 ndim,
            ndim x u32 dims
blob        every tensor in table order, row-major float32
==========  =====================================================
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import InvalidInputError
from .store import MissingInputError

MAGIC = b"HSTV"
VERSION = 1


class CheckpointError(InvalidInputError):
    pass


def encode(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    blobs = []
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f4", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    return b"".join(parts + blobs)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        config = json.loads(bytes(take(cfg_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint config: {e}") from None
    (n,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError("trailing bytes after tensor blob")
    return config, tensors


def save(path, config: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(encode(config, tensors))
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing input: checkpoint {path} does not exist")
    return decode(path.read_bytes())


def state_arrays(module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state(module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    import torch

    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not match the model: {e}") from None
