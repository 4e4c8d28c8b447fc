"""Named parameter collections and their binary serialization.

Layout of one parameter block (all integers little-endian)::

    magic    4 bytes   b"TVMP"
    version  uint32    1
    count    uint32    number of parameters
    repeated count times, in store order:
        path_len  uint32
        path      path_len bytes, UTF-8
        rank      uint32
        extents   rank x uint64
        values    prod(extents) x float64, little-endian, C order
"""
from __future__ import annotations

import io
import struct
from typing import Iterator, Mapping

import numpy as np

from .errors import CheckpointError, ShapeError

MAGIC = b"TVMP"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class ParamStore(Mapping[str, np.ndarray]):
    """Ordered map from parameter path to float64 array."""

    def __init__(self, items=None):
        self._data: dict[str, np.ndarray] = {}
        if items is not None:
            pairs = items.items() if isinstance(items, Mapping) else items
            for k, v in pairs:
                self[k] = v

    def __getitem__(self, key):
        return self._data[key]

    def __setitem__(self, key, value):
        if not isinstance(key, str) or not key:
            raise KeyError(f"parameter path must be a non-empty string: {key!r}")
        self._data[key] = np.asarray(value, dtype=np.float64, order="C")  # keeps 0-d shapes

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        return f"ParamStore({len(self)} tensors, {self.size()} values)"

    def size(self):
        return int(sum(v.size for v in self._data.values()))

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self._data.items())

    def zeros_like(self) -> "ParamStore":
        return ParamStore((k, np.zeros_like(v)) for k, v in self._data.items())

    def check_aligned(self, other: Mapping[str, np.ndarray]):
        if list(self) != list(other):
            raise ShapeError("parameter stores have different paths or order")
        for k in self:
            if self[k].shape != np.shape(other[k]):
                raise ShapeError(f"{k}: shape {self[k].shape} vs {np.shape(other[k])}")

    def flat(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def with_flat(self, flat: np.ndarray) -> "ParamStore":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size():
            raise ShapeError(f"flat vector has {flat.size} values, store holds {self.size()}")
        out, pos = ParamStore(), 0
        for k, v in self._data.items():
            out[k] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return out

    # -- serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_store(buf, self)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        buf = io.BytesIO(data)
        store = read_store(buf)
        if buf.read(1):
            raise CheckpointError("trailing bytes after parameter block")
        return store


def write_store(fh, store: Mapping[str, np.ndarray]):
    fh.write(MAGIC)
    fh.write(_U32.pack(VERSION))
    fh.write(_U32.pack(len(store)))
    for path, arr in store.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = path.encode("utf-8")
        fh.write(_U32.pack(len(raw)))
        fh.write(raw)
        fh.write(_U32.pack(arr.ndim))
        for e in arr.shape:
            fh.write(_U64.pack(e))
        fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def read_store(fh) -> ParamStore:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise CheckpointError(f"bad parameter-block magic {magic!r}")
    (version,) = _U32.unpack(_read_exact(fh, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported parameter-block version {version}")
    (count,) = _U32.unpack(_read_exact(fh, 4))
    store = ParamStore()
    for _ in range(count):
        (n,) = _U32.unpack(_read_exact(fh, 4))
        path = _read_exact(fh, n).decode("utf-8")
        (rank,) = _U32.unpack(_read_exact(fh, 4))
        shape = tuple(_U64.unpack(_read_exact(fh, 8))[0] for _ in range(rank))
        count_vals = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(_read_exact(fh, 8 * count_vals), dtype="<f8")
        if path in store:
            raise CheckpointError(f"duplicate parameter path {path!r}")
        store[path] = values.reshape(shape).astype(np.float64)
    return store


def save(store: ParamStore, path):
    with open(path, "wb") as fh:
        write_store(fh, store)


def load(path) -> ParamStore:
    with open(path, "rb") as fh:
        store = read_store(fh)
        if fh.read(1):
            raise CheckpointError("trailing bytes after parameter block")
    return store
