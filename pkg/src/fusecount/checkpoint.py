"""Single-file checkpoint format.

Layout: 8-byte magic ``FCCKPT1\\n``, an 8-byte little-endian header length,
a UTF-8 JSON header, then the concatenated parameter buffers as raw
little-endian float64 in the header's order.  The header maps dotted
parameter names to shapes and byte offsets and carries a free-form ``meta``
dict (resolved training config, stage tag, and so on).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"FCCKPT1\n"


def save_checkpoint(path: str | Path, params: dict[str, Tensor],
                    meta: dict | None = None) -> None:
    names = sorted(params)
    entries = {}
    offset = 0
    buffers = []
    for name in names:
        # asarray keeps 0-d shapes; ascontiguousarray would promote them.
        data = np.asarray(params[name].data, dtype="<f8", order="C")
        entries[name] = {"shape": list(data.shape), "offset": offset}
        buffers.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"params": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file (bad magic)")
    header_len = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])[0]
    header_start = len(MAGIC) + 8
    header = json.loads(blob[header_start:header_start + header_len].decode("utf-8"))
    body = blob[header_start + header_len:]
    arrays = {}
    for name, entry in header["params"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into live parameter tensors, by exact name."""
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {missing[:5]}")
    for name, tensor in params.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint parameter '{name}' has shape {arr.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data = arr.copy()
