"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic      8 bytes  b"SPLMCKP1"
    version    u32
    meta_len   u64      followed by meta_len bytes of JSON (sorted keys)
    count      u64      number of tensor records
    records    name_len u16, name utf-8, dtype tag u8, ndim u8,
               dims u64 * ndim, raw little-endian element data

Round trips are byte-exact: writing the result of ``load`` reproduces the
original file bit for bit.
"""

from __future__ import annotations

import json
import struct

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"SPLMCKP1"
VERSION = 1

_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAG_FOR_KIND = {("f", 4): 1, ("f", 8): 2, ("i", 8): 3}


class CheckpointError(RuntimeError):
    pass


def _tag_for(arr):
    key = (arr.dtype.kind, arr.dtype.itemsize)
    tag = _TAG_FOR_KIND.get(key)
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def save_checkpoint(path, meta, tensors):
    """Write metadata (JSON-serializable dict) and named arrays to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _tag_for(arr), arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(fh, size, what):
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint; returns (meta dict, ordered name -> ndarray dict)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "meta length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(fh, 2, "record header"))
            dtype = _DTYPE_TAGS.get(tag)
            if dtype is None:
                raise CheckpointError(f"unknown dtype tag {tag} for '{name}'")
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, "dimension"))[0]
                for _ in range(ndim)
            )
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"data of '{name}'")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
            tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        return meta, tensors
