"""Versioned binary checkpoints for named parameter tensors.

Layout (all integers little-endian):

    magic   b"RAFT"
    u16     format version
    u32     config length, then config as canonical UTF-8 JSON
    u32     parameter count
    per parameter (sorted by name):
        u32 name length, name bytes
        u32 rank, u32 per dimension
        raw little-endian IEEE-754 float32 values (row-major)

The config JSON is canonicalized (sorted keys, compact separators) so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError

MAGIC = b"RAFT"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class Checkpoint:
    """Architecture config plus named float32 parameter arrays."""

    config: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
        cfg = canonical_json(self.config).encode("utf-8")
        chunks.append(struct.pack("<I", len(cfg)))
        chunks.append(cfg)
        names = sorted(self.params)
        chunks.append(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            nb = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(nb)))
            chunks.append(nb)
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
        return b"".join(chunks)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        view = memoryview(blob)
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(view):
                raise DataError("checkpoint truncated")
            piece = view[off : off + n]
            off += n
            return piece

        if bytes(take(4)) != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<H", take(2))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", take(4))
        try:
            config = json.loads(bytes(take(clen)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"checkpoint config unreadable: {e}") from e
        (count,) = struct.unpack("<I", take(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = bytes(take(nlen)).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            n_vals = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(shape).copy()
            params[name] = arr
        if off != len(view):
            raise DataError("checkpoint has trailing bytes")
        return cls(config=config, params=params)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def tensors(self, requires_grad: bool = False, dtype=np.float32) -> dict[str, Tensor]:
        return {
            name: Tensor(arr.astype(dtype), requires_grad=requires_grad)
            for name, arr in self.params.items()
        }

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
