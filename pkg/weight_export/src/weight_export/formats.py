"""Writers for the portable formats the similarity engine ingests.

This tool deliberately does not import the engine; the byte layouts below
are the shared contract between the two packages, and each side implements
its half independently.

Weight container layout::

    bytes 0-7     header length N, unsigned 64-bit little-endian
    bytes 8..8+N  UTF-8 JSON: {tensor_name: {"dtype": "f32", "shape": [...],
                  "offset": int, "nbytes": int}, "__meta__": {...}}
    bytes 8+N..   raw tensor data, row-major, little-endian float32

Tensor offsets are relative to the start of the data section (byte 8+N);
the header is space-padded so the data section starts 8-byte aligned.

Network spec documents are JSON::

    {"name": str,
     "preprocess": {"mean": [3 floats], "std": [3 floats]},
     "layers": [{"kind": "conv2d"|"relu"|"maxpool"|"fire", ..., "tap": true?}]}
"""

import json
import struct

import numpy as np

from .errors import ExportError

META_KEY = "__meta__"


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    """Write ``tensors`` (name -> array, coerced to little-endian float32)."""
    entries = {}
    blobs = []
    offset = 0
    for name, array in tensors.items():
        if name == META_KEY:
            raise ExportError(f"{META_KEY!r} is reserved for container metadata")
        data = np.ascontiguousarray(array, dtype="<f4")
        entries[name] = {"dtype": "f32", "shape": list(data.shape),
                         "offset": offset, "nbytes": data.nbytes}
        blobs.append(data.tobytes())
        offset += data.nbytes
    entries[META_KEY] = dict(meta or {})
    header = json.dumps(entries).encode("utf-8")
    header += b" " * (-(8 + len(header)) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def write_spec(path, doc: dict) -> None:
    """Write a network spec document after a shallow schema check."""
    for field in ("name", "preprocess", "layers"):
        if field not in doc:
            raise ExportError(f"spec document is missing {field!r}")
    for i, entry in enumerate(doc["layers"]):
        if "kind" not in entry:
            raise ExportError(f"spec layer {i} has no kind")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2))
