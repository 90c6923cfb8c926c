"""Versioned named-tensor checkpoint container.

Binary layout (all integers little-endian):

    magic    8 bytes  b"CLVCCKPT"
    u32      format version
    u16+utf8 stage tag
    u32+utf8 metadata JSON (sorted keys; config echo, stats, RNG seed)
    u32      tensor count
    per tensor (sorted by name):
        u16+utf8 name
        u8       ndim
        u32[]    dims
        u64      payload byte length (= prod(dims) * 4)
        bytes    float32 little-endian, row-major

Saving is canonical (sorted tensors, sorted JSON keys), so
save(load(save(x))) is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CLVCCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    metadata: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in list(self.tensors.items()):
            self.tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)

    def tensor(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        return self.tensors[name]


def _encode_str(s: str, width: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(f"<{width}", len(raw)) + raw


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta_json = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":"))
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_encode_str(ckpt.stage, "H"))
    parts.append(_encode_str(meta_json, "I"))
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        parts.append(_encode_str(name, "H"))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.astype("<f4", copy=False).tobytes(order="C")
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u(self, fmt: str) -> int:
        return struct.unpack(f"<{fmt}", self.take(struct.calcsize(fmt)))[0]

    def string(self, width: str) -> str:
        return self.take(self.u(width)).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u("I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    stage = r.string("H")
    try:
        metadata = json.loads(r.string("I"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata block: {exc}") from exc
    n_tensors = r.u("I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.string("H")
        ndim = r.u("B")
        shape = tuple(r.u("I") for _ in range(ndim))
        byte_len = r.u("Q")
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if byte_len != expected:
            raise CheckpointError(
                f"{path}: tensor {name!r} claims {byte_len} bytes, shape {shape} needs {expected}"
            )
        payload = r.take(byte_len)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes after tensor table")
    return Checkpoint(stage=stage, metadata=metadata, tensors=tensors)


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_tensor_text(arr: np.ndarray, path) -> None:
    """Delimited-text debug dump: one row per line, tab-separated %.9e floats."""
    arr = np.asarray(arr)
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
    with open(path, "w") as fh:
        fh.write(f"# shape {'x'.join(str(d) for d in arr.shape)}\n")
        for row in flat:
            fh.write("\t".join(f"{v:.9e}" for v in row) + "\n")


def read_tensor_text(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        shape = tuple(int(d) for d in header.split()[-1].split("x"))
        rows = [[float(v) for v in line.split("\t")] for line in fh if line.strip()]
    return np.asarray(rows).reshape(shape)
