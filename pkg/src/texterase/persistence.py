"""Binary serialization of encoder deltas and fingerprint-checked application.

File layout (all integers little-endian):

    magic "ERSD" | version u32 | fingerprint 32B
    | concept count u32 | per concept: length u32 + UTF-8 bytes
    | config pair count u32 | per pair: (length u32 + key, length u32 + value)
    | entry count u32
    | per entry: path length u32 | UTF-8 path | rank u32 | dims u64 each
                 | dtype u8 (0 = float32) | raw little-endian values
"""

from __future__ import annotations

import os
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .eraser import EncoderDelta
from .masking import IncompatibleSnapshotError, MissingParameterError, encoder_fingerprint

MAGIC = b"ERSD"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0

_FLOAT32_LE = np.dtype("<f4")


class DeltaFormatError(ValueError):
    """Not a delta file, or an unsupported version/dtype."""


class DeltaCorruptionError(ValueError):
    """Structurally valid header but truncated or inconsistent payload."""


class TransferRefusedError(RuntimeError):
    """Strict apply onto an encoder whose fingerprint does not match."""


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    array = tensor.detach().contiguous().to(torch.float32).numpy()
    return np.ascontiguousarray(array, dtype=_FLOAT32_LE).tobytes()


def serialize_delta(delta: EncoderDelta) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), delta.base_fingerprint]
    parts.append(struct.pack("<I", len(delta.concepts)))
    parts.extend(_pack_str(c) for c in delta.concepts)
    parts.append(struct.pack("<I", len(delta.config)))
    for key, value in delta.config:
        parts.append(_pack_str(key))
        parts.append(_pack_str(value))
    parts.append(struct.pack("<I", len(delta.entries)))
    for path, tensor in delta.entries:
        parts.append(_pack_str(path))
        dims = tuple(tensor.shape)
        parts.append(struct.pack("<I", len(dims)))
        parts.extend(struct.pack("<Q", d) for d in dims)
        parts.append(struct.pack("<B", DTYPE_FLOAT32))
        parts.append(_tensor_bytes(tensor))
    return b"".join(parts)


@contextmanager
def atomic_write(path: str | Path) -> Iterator[Path]:
    """Yield a temp path next to `path`; rename over it only on success."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        tmp.unlink(missing_ok=True)


def save_delta(delta: EncoderDelta, path: str | Path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    with atomic_write(path) as tmp:
        tmp.write_bytes(serialize_delta(delta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DeltaCorruptionError(
                f"truncated delta file: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DeltaCorruptionError(f"invalid UTF-8 at offset {self.pos}: {exc}") from exc

    def done(self) -> bool:
        return self.pos == len(self.buf)


def deserialize_delta(buf: bytes) -> EncoderDelta:
    reader = _Reader(buf)
    if reader.take(4) != MAGIC:
        raise DeltaFormatError("bad magic: not an encoder-delta file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise DeltaFormatError(f"unsupported delta format version {version}")
    fingerprint = reader.take(32)

    concepts = tuple(reader.string() for _ in range(reader.u32()))
    config = tuple((reader.string(), reader.string()) for _ in range(reader.u32()))

    entries = []
    for _ in range(reader.u32()):
        path = reader.string()
        rank = reader.u32()
        dims = tuple(reader.u64() for _ in range(rank))
        dtype = reader.u8()
        if dtype != DTYPE_FLOAT32:
            raise DeltaFormatError(f"unsupported dtype code {dtype} for entry {path!r}")
        count = 1
        for d in dims:
            count *= d
        raw = reader.take(count * 4)
        values = torch.from_numpy(np.frombuffer(raw, dtype=_FLOAT32_LE).copy().reshape(dims))
        entries.append((path, values))
    if not reader.done():
        raise DeltaCorruptionError(f"{len(buf) - reader.pos} trailing bytes after last entry")
    return EncoderDelta(
        base_fingerprint=fingerprint, concepts=concepts, config=config, entries=tuple(entries)
    )


def load_delta(path: str | Path) -> EncoderDelta:
    return deserialize_delta(Path(path).read_bytes())


def apply_delta(encoder: nn.Module, delta: EncoderDelta, strict: bool = True) -> nn.Module:
    """Overwrite the delta's parameters on `encoder`, in place.

    Strict mode refuses encoders whose fingerprint differs from the delta's
    base; non-strict only requires the paths to exist with matching shapes
    (the cross-model transfer case).
    """
    if strict:
        fingerprint = encoder_fingerprint(encoder)
        if fingerprint != delta.base_fingerprint:
            raise TransferRefusedError(
                "encoder fingerprint does not match the delta's base "
                f"({fingerprint.hex()[:12]} != {delta.base_fingerprint.hex()[:12]}); "
                "pass strict=False to apply by layout only"
            )
    named = dict(encoder.named_parameters())
    staged = []
    for path, value in delta.entries:
        if path not in named:
            raise MissingParameterError(path)
        if tuple(named[path].shape) != tuple(value.shape):
            raise IncompatibleSnapshotError(
                f"shape mismatch at {path}: encoder {tuple(named[path].shape)}, "
                f"delta {tuple(value.shape)}"
            )
        staged.append((named[path], value))
    with torch.no_grad():
        for param, value in staged:
            param.copy_(value)
    return encoder


def describe_delta(delta: EncoderDelta) -> str:
    """Human-readable summary; entry paths appear in file order."""
    lines = [
        f"base fingerprint: {delta.base_fingerprint.hex()}",
        f"concepts: {', '.join(delta.concepts) if delta.concepts else '(none)'}",
        "config:",
    ]
    lines.extend(f"  {k} = {v}" for k, v in delta.config)
    lines.append(f"entries ({len(delta.entries)}):")
    for path, tensor in delta.entries:
        dims = "x".join(str(d) for d in tensor.shape) or "scalar"
        lines.append(f"  {path}  [{dims}] float32")
    return "\n".join(lines) + "\n"
