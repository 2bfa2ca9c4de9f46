"""Binary parameter files.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header, then every parameter's float64 values (little-endian, row-major) in
header order. The header carries ``format_version``, the per-parameter name,
shape and byte offset, plus caller metadata. Output is byte-deterministic.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RCPARAM\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "params": entries, "meta": dict(meta or {})}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def load_params(path, expected_shapes: Mapping[str, tuple[int, ...]] | None = None):
    """Return ``(params, meta)``; validates shapes against ``expected_shapes`` when given."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    body = raw[16 + hlen:]
    params = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(shape)
        params[e["name"]] = arr
    if expected_shapes is not None:
        missing = sorted(set(expected_shapes) - set(params))
        extra = sorted(set(params) - set(expected_shapes))
        if missing or extra:
            raise CheckpointError(f"{path}: parameter set mismatch (missing={missing}, unexpected={extra})")
        for name, shape in expected_shapes.items():
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{path}: parameter '{name}' has shape {params[name].shape}, config expects {tuple(shape)}"
                )
    return params, header["meta"]
