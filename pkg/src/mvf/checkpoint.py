"""Named-tensor container: text header plus little-endian float64 payloads.

Layout::

    MVFCKPT 1
    meta <key> <value>
    tensor <name> <d0,d1,...>
    end
    <payload of each tensor, header order, '<f8' row-major>
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from mvf._io import atomic_write_bytes
from mvf.errors import TruncatedFile

MAGIC = "MVFCKPT 1"


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in k) or "\n" in str(v):
            raise ValueError(f"bad meta entry {k!r}")
        lines.append(f"meta {k} {v}")
    payload = []
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype="<f8")
        lines.append(f"tensor {name} {','.join(str(d) for d in arr.shape)}")
        payload.append(np.ascontiguousarray(arr).tobytes())
    lines.append("end")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii") + b"".join(payload))


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; tensors keep header order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0
    header = []
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise TruncatedFile(f"{path}: header has no end marker")
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    if not header or header[0] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    meta, tensors = {}, {}
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif kind == "tensor":
            name, _, dims = rest.partition(" ")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            n = int(np.prod(shape)) if shape else 1
            if pos + 8 * n > len(blob):
                raise TruncatedFile(f"{path}: payload of {name} is cut short")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors, meta
