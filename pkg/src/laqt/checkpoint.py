"""Bit-exact binary checkpoints.

Layout (all little-endian):

    magic  b"LAQT"
    u32    format version (currently 1)
    str    mixer kind          (str = u32 byte length + UTF-8 bytes)
    str    agent kind
    str    config hash
    u64    env-step counter
    u32    parameter count
    per parameter, sorted by name:
        str  name
        u32  rank
        u64  dims[rank]
        f64  values (row-major)

The format is self-describing: loading never consults a config except to
validate compatibility. Reload reproduces forward passes bit-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LAQT"
VERSION = 1


class CheckpointFormatError(RuntimeError):
    pass


class IncompatibleCheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointMeta:
    mixer_kind: str
    agent_kind: str
    config_hash: str
    env_steps: int


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.off = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointFormatError(f"{self.source}: truncated (needed {n} bytes at offset {self.off})")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save(path: str | Path, params: dict[str, np.ndarray], meta: CheckpointMeta) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(_pack_str(meta.mixer_kind))
    chunks.append(_pack_str(meta.agent_kind))
    chunks.append(_pack_str(meta.config_hash))
    chunks.append(struct.pack("<Q", meta.env_steps))
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        # asarray keeps rank-0 arrays rank 0 (ascontiguousarray would not)
        arr = np.asarray(params[name], dtype=np.float64, order="C")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], CheckpointMeta]:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {VERSION}")
    meta = CheckpointMeta(
        mixer_kind=r.string(),
        agent_kind=r.string(),
        config_hash=r.string(),
        env_steps=r.u64(),
    )
    params: dict[str, np.ndarray] = {}
    count = r.u32()
    for _ in range(count):
        name = r.string()
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims)
        params[name] = data.copy()
    if r.off != len(r.blob):
        raise CheckpointFormatError(f"{path}: {len(r.blob) - r.off} trailing bytes")
    return params, meta


def apply_to(params: dict[str, np.ndarray], target: dict) -> None:
    """Copy loaded arrays into a live parameter table, validating shapes.

    Raises IncompatibleCheckpointError naming the first conflict, which is
    how a population-dependent network refuses a checkpoint from a scenario
    of a different size.
    """
    missing = sorted(set(target) - set(params))
    extra = sorted(set(params) - set(target))
    if missing or extra:
        raise IncompatibleCheckpointError(
            f"parameter names disagree (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, tensor in target.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise IncompatibleCheckpointError(
                f"shape conflict for {name!r}: checkpoint {arr.shape} vs network {tensor.data.shape}"
            )
    for name, tensor in target.items():
        tensor.data[...] = params[name]
