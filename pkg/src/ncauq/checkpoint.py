"""Binary checkpoint container for automaton parameters.

Layout (all integers little-endian uint32, floats little-endian float32):

    magic   8 bytes  b"NCAUQCKP"
    version u32      currently 1
    C       u32      state channels
    hidden  u32      hidden size
    fire    f32      fire rate
    nparams u32
    then per parameter:
        name_len u32, name utf-8, rank u32, dims u32 * rank,
        payload f32 * prod(dims)

Loading reproduces every parameter bitwise.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .nca import NcaParams

MAGIC = b"NCAUQCKP"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint file."""


def save_checkpoint(params: NcaParams, path: str | Path) -> None:
    parts = [MAGIC, struct.pack("<IIIf", VERSION, params.num_channels,
                                params.hidden_size, params.fire_rate)]
    named = params.tensors()
    parts.append(struct.pack("<I", len(named)))
    for name, tensor in named.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> NcaParams:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated (needed {n} bytes at offset {pos})")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, channels, hidden, fire_rate = struct.unpack("<IIIf", take(16))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (nparams,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(nparams):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    missing = {"w1", "b1", "w2"} - arrays.keys()
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return NcaParams(
        num_channels=channels,
        hidden_size=hidden,
        fire_rate=fire_rate,
        w1=Tensor(arrays["w1"], requires_grad=True),
        b1=Tensor(arrays["b1"], requires_grad=True),
        w2=Tensor(arrays["w2"], requires_grad=True),
    )
