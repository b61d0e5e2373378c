"""Self-describing binary container for named float32 arrays.

Layout (little-endian)::

    magic      8 bytes  b"PDPPCKPT"
    version    u32
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON
    repeated until EOF:
        name_len u32, name bytes, rank u32, rank x u32 dims, prod(dims) x f32
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDPPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], metadata: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte offset {pos} (need {n} bytes)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    return arrays, metadata


def save(path, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays, metadata))
    tmp.replace(path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
