"""Named-tensor checkpoint files.

Layout (little-endian): magic ``POCK``, version u16, tensor count u32; per
tensor a u16-prefixed UTF-8 name, rank u8, u64 dims, f32 data; then a
u32-prefixed UTF-8 config snapshot.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"POCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    config: str = ""

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")  # ascontiguousarray would make 0-d 1-d
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    text = ckpt.config.encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if n < 0 or off + n > len(buf):
            raise CheckpointError(f"corrupt checkpoint: {what} needs {n} bytes at offset {off}, {len(buf) - off} left")
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupt checkpoint: undecodable tensor name at offset {off - n}") from None
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} dims"))
        size = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        data = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(data.astype(np.float32))
    (n,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = take(n, "config").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("corrupt checkpoint: config snapshot is not UTF-8") from None
    if off != len(buf):
        raise CheckpointError(f"corrupt checkpoint: {len(buf) - off} trailing bytes")
    return Checkpoint(tensors, config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: a crash leaves either the old file or the new one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def load_state(module: torch.nn.Module, tensors: dict[str, torch.Tensor], what: str = "model") -> None:
    """Copies tensors into ``module``; shape or key mismatches name the tensor."""
    state = module.state_dict()
    missing = [k for k in state if k not in tensors]
    extra = [k for k in tensors if k not in state]
    if missing or extra:
        raise CheckpointError(f"{what}: missing tensors {missing[:5]}, unexpected tensors {extra[:5]}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(tensors[k].shape):
            raise CheckpointError(
                f"{what}: tensor {k!r} has shape {tuple(tensors[k].shape)} in checkpoint, model expects {tuple(v.shape)}"
            )
    module.load_state_dict({k: tensors[k].to(state[k].dtype) for k in state})
