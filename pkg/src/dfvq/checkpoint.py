"""Binary checkpoint container.

Layout (all integers little-endian):

    magic           4 bytes ("DFVQ" codec / "MPS2" seq2seq)
    version         u32 (currently 1)
    meta length     u32, then UTF-8 JSON {"config": ..., "seed": ..., "step": ...}
    array count     u32
    per array:
        name length u32, then UTF-8 name
        dtype code  u32 (0 = float32 LE)
        rank        u32
        dims        u64 each
        data        raw float32 LE, C order

Writes are atomic (temp file in the target directory, then rename) and
round-trip bit-exactly: save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path: str, magic: bytes, config: dict, seed: int, step: int,
                    arrays: dict) -> None:
    if len(magic) != 4:
        raise CheckpointError(f"magic must be 4 bytes, got {magic!r}")
    meta = json.dumps({"config": config, "seed": int(seed), "step": int(step)},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = bytearray()
    blob += magic
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(meta)) + meta
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc)) + enc
        blob += struct.pack("<I", DTYPE_F32)
        blob += struct.pack("<I", data.ndim)
        for d in data.shape:
            blob += struct.pack("<Q", d)
        blob += data.tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    """Returns (magic, config, seed, step, arrays) with float32 arrays."""
    with open(path, "rb") as fh:
        buf = fh.read()
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    magic = bytes(take(4))
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(u32())).decode("utf-8"))
    count = u32()
    arrays = {}
    for _ in range(count):
        name = bytes(take(u32())).decode("utf-8")
        dtype = u32()
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype} for array '{name}'")
        rank = u32()
        dims = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last array")
    return magic, meta["config"], meta["seed"], meta["step"], arrays
