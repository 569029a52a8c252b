"""Named-tensor container for transferring and persisting model parameters.

Binary layout: magic "ACPK1" (5 bytes), u32-LE tensor count, then per
tensor a u16-LE name length, the UTF-8 name, a u8 rank, rank u64-LE dims,
and the row-major float64-LE values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ACPK1"


class Checkpoint:
    """An ordered mapping of unique tensor names to float64 arrays."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        for name, values in (tensors or {}).items():
            self.add(name, values)

    def add(self, name: str, values) -> None:
        if name in self.tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        self.tensors[name] = np.array(values, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self.tensors))]
        for name, values in self.tensors.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", values.ndim))
            parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
            parts.append(values.astype("<f8").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        if raw[:5] != MAGIC:
            raise FormatError(f"{source}: bad checkpoint magic {raw[:5]!r}")
        pos = 5
        if len(raw) < pos + 4:
            raise FormatError(f"{source}: truncated tensor count")
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        ckpt = cls()
        for _ in range(count):
            if len(raw) < pos + 2:
                raise FormatError(f"{source}: truncated name length")
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            if len(raw) < pos + 1:
                raise FormatError(f"{source}: truncated rank for {name!r}")
            rank = raw[pos]
            pos += 1
            if len(raw) < pos + 8 * rank:
                raise FormatError(f"{source}: truncated dims for {name!r}")
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = size * 8
            if len(raw) < pos + nbytes:
                raise FormatError(
                    f"{source}: payload for {name!r} declares {size} values "
                    f"but only {(len(raw) - pos) // 8} remain")
            values = np.frombuffer(raw, dtype="<f8", count=size, offset=pos)
            pos += nbytes
            ckpt.add(name, values.reshape(dims))
        if pos != len(raw):
            raise FormatError(f"{source}: {len(raw) - pos} trailing bytes")
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), source=str(path))
