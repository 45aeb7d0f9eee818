"""FGT1 raw tensor files and named-tensor archives.

Layout: b"FGT1", dtype code (u8: 0=f32, 1=f64), rank (u32), dims (u32 each),
then the little-endian row-major payload.  An archive is a directory of
``<name>.fgt`` files plus ``manifest.json``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FGT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    code = _CODES.get(np.dtype(arr.dtype.newbyteorder("=")))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic")
    code, rank = struct.unpack_from("<BI", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    off = 9 + 4 * rank
    dims = struct.unpack_from(f"<{rank}I", buf, 9)
    dt = _DTYPES[code]
    n = int(np.prod(dims)) if rank else 1
    if len(buf) != off + n * dt.itemsize:
        raise FormatError(f"{source}: payload size mismatch")
    return np.frombuffer(buf, dtype=dt, offset=off, count=n).reshape(dims).astype(dt.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def save_archive(directory, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        save(d / f"{name}.fgt", arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
    manifest = {"tensors": entries, **(meta or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_archive(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"missing archive manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        arr = load(d / f"{entry['name']}.fgt")
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{entry['name']}: shape {arr.shape} does not match manifest {entry['shape']}")
        tensors[entry["name"]] = arr
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, meta
