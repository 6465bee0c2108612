"""Single-file container of named arrays.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"FBPCARR1"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header
    then                 raw array payloads, back to back

The header is ``{"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
"meta": {...}}``. ``offset`` counts from the first payload byte, ``dtype`` is a
numpy little-endian type string such as ``"<f8"`` or ``"<i4"`` and payloads are
row-major (C order).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from fbpc_lab.errors import ValidationError

MAGIC = b"FBPCARR1"
_ALLOWED = {"<f8", "<f4", "<i8", "<i4", "|u1", "|b1"}


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        a = np.array(value, order="C")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        dtype = a.dtype.str
        if dtype not in _ALLOWED:
            raise ValidationError(f"array {name!r} has unsupported dtype {dtype}")
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": dtype, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    _atomic_write(Path(path), MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks))


def load_arrays(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError(f"{path} is not an array container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise ValidationError(f"{path}: corrupt header") from exc
    base = 16 + hlen
    out = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValidationError(f"{path}: array {e['name']!r} truncated")
        out[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, header.get("meta", {})
