"""The "SMRG" binary container.

Layout::

    b"SMRG" | u32 LE version (=1) | u32 LE header length | UTF-8 JSON header | payload

The header carries a ``kind`` plus a ``tensors`` list of ``{name, dtype, shape}``
records; the payload is each tensor's little-endian bytes in that order, f64
tensors row-major. Checkpoints, datasets, pseudo-labeled sets and learner
parameters all share this container and differ only by ``kind``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SMRG"
VERSION = 1
_DTYPES = {"f64": np.dtype("<f8"), "u32": np.dtype("<u4")}
_PREFIX = struct.Struct("<4sII")


def encode(header: dict, tensors: list[tuple[str, np.ndarray, str]]) -> bytes:
    records = []
    chunks = []
    for name, array, dtype in tensors:
        arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
        records.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    header = dict(header, tensors=records)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, not an SMRG file", 0)
    if len(data) < _PREFIX.size:
        raise FormatError("truncated preamble", len(data))
    _, version, header_len = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    start = _PREFIX.size
    if len(data) < start + header_len:
        raise FormatError("truncated header", len(data))
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", start) from exc
    offset = start + header_len
    records = header.get("tensors")
    if not isinstance(records, list):
        raise FormatError("header has no tensor table", start)

    declared = 0
    for rec in records:
        if rec.get("dtype") not in _DTYPES:
            raise FormatError(f"unknown dtype {rec.get('dtype')!r}", start)
        declared += int(np.prod(rec["shape"], dtype=np.int64)) * _DTYPES[rec["dtype"]].itemsize
    remaining = len(data) - offset
    if declared != remaining:
        raise FormatError(
            f"header declares {declared} payload bytes but {remaining} remain", offset
        )

    tensors = {}
    for rec in records:
        dtype = _DTYPES[rec["dtype"]]
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        native = np.float64 if rec["dtype"] == "f64" else np.int64
        tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(native)
        offset += count * dtype.itemsize
    return header, tensors


def write(path: str | os.PathLike, header: dict, tensors: list[tuple[str, np.ndarray, str]]) -> Path:
    path = Path(path)
    path.write_bytes(encode(header, tensors))
    return path


def read(path: str | os.PathLike, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    header, tensors = decode(Path(path).read_bytes())
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected kind {kind!r}, found {header.get('kind')!r}", _PREFIX.size)
    return header, tensors
