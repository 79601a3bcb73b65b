"""Single-line JSON header followed by a little-endian float64 payload.

Shared by model checkpoints, binary datasets, SNIS weight dumps and metric
sidecars so every persisted artifact is readable with the same few lines of
code in any language.
"""

from __future__ import annotations

import json
from typing import Any, Mapping

import numpy as np


class BlobError(ValueError):
    """Raised for malformed, truncated or inconsistent blob files."""


def dumps(kind: str, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes(order="C"))
    head = dict(header)
    head["kind"] = kind
    head["endianness"] = "little"
    head["dtype"] = "f64"
    head["arrays"] = entries
    line = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return line + b"\n" + b"".join(chunks)


def loads(data: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    nl = data.find(b"\n")
    if nl < 0:
        raise BlobError("missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict) or "arrays" not in header:
        raise BlobError("header lacks an 'arrays' table")
    if kind is not None and header.get("kind") != kind:
        raise BlobError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    if header.get("endianness", "little") != "little" or header.get("dtype", "f64") != "f64":
        raise BlobError("only little-endian f64 payloads are supported")

    payload = memoryview(data)[nl + 1:]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise BlobError(
                f"truncated payload: array {entry['name']!r} needs {nbytes} bytes at "
                f"offset {offset}, only {len(payload) - offset} remain"
            )
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise BlobError(f"{len(payload) - offset} trailing bytes after declared arrays")
    return header, arrays


def save(path, kind: str, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(kind, header, arrays))


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read(), kind)
