"""Portable binary weight container.

File layout::

    bytes 0-7     header length N, unsigned 64-bit little-endian
    bytes 8..8+N  UTF-8 JSON: {tensor_name: {"dtype": "f32", "shape": [...],
                  "offset": int, "nbytes": int}, "__meta__": {...}}
    bytes 8+N..   raw tensor data, row-major, little-endian

Tensor offsets are relative to the start of the data section (byte 8+N).
The header is space-padded so the data section starts 8-byte aligned,
which lets the reader hand out zero-copy array views over an mmap.  The
``__meta__`` entry carries the architecture name and the preprocessing
statistics so a container is self-describing.
"""

import json
import mmap
import struct
from pathlib import Path

import numpy as np

from ..errors import ContainerError

META_KEY = "__meta__"
_DTYPES = {"f32": np.dtype("<f4")}


def write_container(path, tensors, meta=None):
    """Write ``tensors`` (name -> array, coerced to little-endian float32).

    ``meta`` lands in the ``__meta__`` header entry.
    """
    entries = {}
    blobs = []
    offset = 0
    for name, array in tensors.items():
        if name == META_KEY:
            raise ContainerError(f"{META_KEY!r} is reserved")
        data = np.ascontiguousarray(array, dtype="<f4")
        nbytes = data.nbytes
        entries[name] = {"dtype": "f32", "shape": list(data.shape),
                         "offset": offset, "nbytes": nbytes}
        blobs.append(data.tobytes())
        offset += nbytes
    entries[META_KEY] = dict(meta or {})
    header = json.dumps(entries).encode("utf-8")
    pad = -(8 + len(header)) % 8
    header += b" " * pad
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


class WeightContainer:
    """Read-only view over a container file.

    Tensors are exposed as non-writeable float32 views over an mmap;
    nothing is copied until the caller slices.  Keep the container open
    for as long as any view is in use (or rely on the arrays holding a
    reference, which they do).
    """

    def __init__(self, path):
        self.path = Path(path)
        try:
            self._file = open(path, "rb")
        except OSError as exc:
            raise ContainerError(f"cannot open container {path}: {exc}") from exc
        try:
            raw = self._file.read(8)
            if len(raw) != 8:
                raise ContainerError(f"{path}: truncated header length field")
            (header_len,) = struct.unpack("<Q", raw)
            header = self._file.read(header_len)
            if len(header) != header_len:
                raise ContainerError(f"{path}: truncated header")
            try:
                entries = json.loads(header.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ContainerError(f"{path}: bad header JSON: {exc}") from exc
            self.meta = entries.pop(META_KEY, {})
            self._entries = entries
            self._data_start = 8 + header_len
            self._mmap = mmap.mmap(self._file.fileno(), 0, access=mmap.ACCESS_READ)
            self._validate()
        except Exception:
            self._file.close()
            raise

    def _validate(self):
        size = len(self._mmap) - self._data_start
        for name, entry in self._entries.items():
            try:
                dtype, shape = entry["dtype"], entry["shape"]
                offset, nbytes = entry["offset"], entry["nbytes"]
            except (KeyError, TypeError) as exc:
                raise ContainerError(
                    f"{self.path}: tensor {name!r}: malformed entry") from exc
            if dtype not in _DTYPES:
                raise ContainerError(
                    f"{self.path}: tensor {name!r}: unsupported dtype {dtype!r}")
            expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
            if nbytes != expected:
                raise ContainerError(
                    f"{self.path}: tensor {name!r}: nbytes {nbytes} does not "
                    f"match shape {shape}")
            if offset < 0 or offset + nbytes > size:
                raise ContainerError(
                    f"{self.path}: tensor {name!r}: data range out of bounds")

    def __contains__(self, name):
        return name in self._entries

    def names(self):
        return sorted(self._entries)

    def shape(self, name):
        return tuple(self._entry(name)["shape"])

    def _entry(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise ContainerError(
                f"{self.path}: no tensor named {name!r}") from None

    def tensor(self, name):
        entry = self._entry(name)
        start = self._data_start + entry["offset"]
        arr = np.frombuffer(self._mmap, dtype=_DTYPES[entry["dtype"]],
                            count=entry["nbytes"] // 4, offset=start)
        return arr.reshape(entry["shape"])

    def close(self):
        try:
            self._mmap.close()
        except BufferError:
            # Zero-copy tensor views still reference the mapping; the OS
            # releases it once the last view is garbage collected.
            pass
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
