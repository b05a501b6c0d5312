"""Binary tensor dumps and checkpoint files.

Tensor record: ``b"NTRMT"``, u8 version (1), u8 dtype (0 = f64, 1 = f32),
u32 rank, u64 dims, then little-endian row-major data.

Checkpoint: ``b"NTRMCKPT"``, u8 version (1), u32 manifest length, a UTF-8 JSON
manifest (tensor paths in storage order, config echo, training state), then one
tensor record per path.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"NTRMT"
CKPT_MAGIC = b"NTRMCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {array.dtype}; only float64/float32 are stored")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<BBI", VERSION, code, array.ndim))
    stream.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CheckpointError(f"unexpected end of data: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise CheckpointError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<BBI", _read_exact(stream, 6))
    if version != VERSION:
        raise CheckpointError(f"unsupported tensor version {version}")
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank)) if rank else ()
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(stream, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def dump_tensor(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def load_tensor(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``tensors`` (path -> array) in insertion order with a JSON ``meta`` section."""
    manifest = {"paths": list(tensors), "meta": meta}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(blob)))
    buf.write(blob)
    for key in tensors:
        write_tensor(buf, tensors[key])
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        version, n = struct.unpack("<BI", _read_exact(f, 5))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(_read_exact(f, n))
        tensors = {key: read_tensor(f) for key in manifest["paths"]}
    return tensors, manifest["meta"]
