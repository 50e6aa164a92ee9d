"""UNICKPT1 checkpoint files.

Layout, all integers little-endian u32:

    magic "UNICKPT1"
    format version
    metadata length, then UTF-8 metadata text (key=value lines)
    tensor count
    per tensor: name length, UTF-8 name, rank, extents (rank x u32),
                row-major little-endian float64 payload

Round-trips are bit-exact; readers reject truncated files, bad magic,
and unsupported versions with distinct error classes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError
from .ioutil import atomic_write_bytes

CKPT_MAGIC = b"UNICKPT1"
CKPT_VERSION = 1


def format_metadata(meta: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in meta.items())


def parse_metadata(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"malformed metadata line {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def save_checkpoint(path, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    meta_bytes = format_metadata(meta).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        def need(n, what):
            buf = fh.read(n)
            if len(buf) != n:
                raise FormatError(f"truncated checkpoint: {what}")
            return buf

        if need(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
            raise FormatError(f"bad magic in {path.name}")
        (version,) = struct.unpack("<I", need(4, "version"))
        if version != CKPT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", need(4, "metadata length"))
        meta = parse_metadata(need(meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", need(4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", need(4, "name length"))
            name = need(name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", need(4, "rank"))
            if rank > 3:
                raise FormatError(f"tensor {name!r} has rank {rank} > 3")
            shape = struct.unpack(f"<{rank}I", need(4 * rank, "extents"))
            n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = need(8 * n_items, f"payload of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor")
    return meta, tensors
