"""GST1 binary tensor files and checkpoint bundles.

Layout of one file: magic ``b"GST1"``, u8 dtype code (0=f32, 1=f64, 2=u8),
u8 rank, ``rank`` little-endian u64 extents, then the row-major
little-endian payload.

A bundle is a directory holding one ``<name>.gst`` per array plus a
``manifest.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GST1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class GSTFormatError(ValueError):
    pass


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}.get(
        a.dtype.newbyteorder("="))
    if code is None:
        raise GSTFormatError(f"unsupported dtype {a.dtype}")
    a = np.asarray(a, dtype=_CODES[code], order="C")
    head = MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise GSTFormatError("bad magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise GSTFormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    off = 6 + 8 * rank
    dt = _CODES[code]
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - off != n * dt.itemsize:
        raise GSTFormatError(f"payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path, array):
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_bundle(directory, arrays: dict, manifest: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in sorted(arrays):
        save(d / f"{name}.gst", arrays[name])
    meta = dict(manifest or {})
    meta["arrays"] = {k: list(np.shape(arrays[k])) for k in sorted(arrays)}
    (d / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_bundle(directory):
    d = Path(directory)
    meta = json.loads((d / "manifest.json").read_text())
    arrays = {name: load(d / f"{name}.gst") for name in meta["arrays"]}
    return arrays, meta
