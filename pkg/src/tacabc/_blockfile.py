"""Single-file container: JSON header plus raw little-endian array blocks.

Used for caches and basis libraries.  Deliberately avoids zip-based
containers, whose embedded timestamps would break byte-identical reruns.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FormatError

_MAGIC = b"TACABC\x00"
FORMAT_VERSION = 1


def write_blocks(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a header dict and named float64/int64 arrays to one file."""
    order = sorted(arrays)
    meta = {
        "format_version": FORMAT_VERSION,
        "header": header,
        "blocks": [
            {"name": k, "dtype": str(arrays[k].dtype), "shape": list(arrays[k].shape)}
            for k in order
        ],
    }
    head = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        for k in order:
            arr = np.ascontiguousarray(arrays[k])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())


def read_blocks(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a file written by write_blocks; returns (header, arrays)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise FormatError(f"{path}: not a block file")
        try:
            head_len = int.from_bytes(fh.read(8), "little")
            meta = json.loads(fh.read(head_len))
        except (ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header ({exc})") from exc
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {meta.get('format_version')}")
        arrays = {}
        for block in meta["blocks"]:
            shape = tuple(block["shape"])
            dtype = np.dtype(block["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise FormatError(f"{path}: truncated block {block['name']!r}")
            arrays[block["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return meta["header"], arrays
