"""Flat binary tensor records and the checkpoint container built from them.

Record layout (all integers little-endian):

    bytes 0..7   magic "M3STNSR1"
    bytes 8..11  u32 rank
    next 8*rank  u64 dims
    payload      float64 values, little-endian, row-major

A checkpoint is one binary file of concatenated records plus a plain-text
manifest with one ``name dim0xdim1x...`` line per record, in record order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"M3STNSR1"


def write_record(fh, array: np.ndarray) -> None:
    a = np.asarray(array, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", a.ndim))
    for d in a.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(a.astype("<f8", copy=False).tobytes(order="C"))


def read_record(fh) -> np.ndarray:
    magic = fh.read(8)
    if magic != MAGIC:
        raise DataError(f"bad tensor record magic {magic!r}")
    (rank,) = struct.unpack("<I", _exactly(fh, 4))
    dims = struct.unpack(f"<{rank}Q", _exactly(fh, 8 * rank)) if rank else ()
    count = 1
    for d in dims:
        count *= d
    payload = _exactly(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def _exactly(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"tensor record truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write ``named`` tensors to ``path`` plus ``path.manifest.txt``."""
    path = Path(path)
    with open(path, "wb") as fh:
        for arr in named.values():
            write_record(fh, arr)
    manifest = "".join(
        f"{name} {'x'.join(str(d) for d in np.shape(arr)) or 'scalar'}\n"
        for name, arr in named.items())
    manifest_path(path).write_text(manifest)


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read back a container written by :func:`save_tensors`."""
    path = Path(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise DataError(f"missing manifest {mpath}")
    names = []
    for line in mpath.read_text().splitlines():
        line = line.strip()
        if line:
            names.append(line.split()[0])
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for name in names:
            out[name] = read_record(fh)
        if fh.read(1):
            raise DataError(f"{path} has trailing bytes beyond the manifest's records")
    return out


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.txt")


__all__ = ["MAGIC", "write_record", "read_record", "save_tensors",
           "load_tensors", "manifest_path"]
