"""Binary checkpoint persistence for model parameters.

Layout (all integers little-endian u32, floats little-endian float32):

    magic bytes ``TDIR``
    format version
    length-prefixed canonical model-config text block
    tensor count
    per tensor, in lexicographic name order:
        name byte length, name bytes (UTF-8),
        ndim, each dim, raw float32 values
    length-prefixed metadata text block (sorted ``key=value`` lines)

The writer always emits canonical ordering, so load -> save round-trips
byte-for-byte.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from timearrow.network import ModelConfig

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"TDIR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible."""


@dataclass
class Checkpoint:
    """A named float32 tensor map plus the config that shaped it."""

    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _metadata_text(metadata: dict[str, str]) -> str:
    for key, value in metadata.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"metadata key/value may not contain '=' in key or newlines: {key!r}")
    return "".join(f"{k}={metadata[k]}\n" for k in sorted(metadata))


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write atomically (temp file + rename in the target directory)."""
    path = Path(path)
    chunks = [MAGIC, _pack_u32(checkpoint.format_version)]
    config_block = checkpoint.model_config.to_text().encode()
    chunks.append(_pack_u32(len(config_block)))
    chunks.append(config_block)
    chunks.append(_pack_u32(len(checkpoint.tensors)))
    for name in sorted(checkpoint.tensors):
        array = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f4")
        name_bytes = name.encode()
        chunks.append(_pack_u32(len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(_pack_u32(array.ndim))
        for dim in array.shape:
            chunks.append(_pack_u32(dim))
        chunks.append(array.tobytes())
    meta_block = _metadata_text(checkpoint.metadata).encode()
    chunks.append(_pack_u32(len(meta_block)))
    chunks.append(meta_block)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        piece = self.blob[self.offset: self.offset + n]
        self.offset += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    config = ModelConfig.from_text(reader.take(reader.u32()).decode())
    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode()
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = values.astype(np.float32, copy=True)
    metadata: dict[str, str] = {}
    for line in reader.take(reader.u32()).decode().splitlines():
        if line:
            key, _, value = line.partition("=")
            metadata[key] = value
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"{path}: {len(reader.blob) - reader.offset} trailing bytes")
    return Checkpoint(model_config=config, tensors=tensors, metadata=metadata, format_version=version)
