"""Minimal reader/writer for the bank's single-file tensor container.

Byte layout: an unsigned 64-bit little-endian header length, a UTF-8 JSON
header (keys sorted, no insignificant whitespace) mapping tensor names to
``{dtype, shape, data_offsets}`` plus a ``__metadata__`` string map, then
the raw little-endian float32 buffer. Tensors are laid out contiguously in
lexicographic name order, which makes the whole file a pure function of
its contents.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import PyshimError


def tensor_file_bytes(tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> bytes:
    header: dict[str, object] = {"__metadata__": {k: str(v) for k, v in metadata.items()}}
    chunks: list[bytes] = []
    cursor = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        raw = arr.tobytes(order="C")
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [cursor, cursor + len(raw)],
        }
        chunks.append(raw)
        cursor += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def write_tensor_file(
    tensors: dict[str, np.ndarray], metadata: dict[str, str], path
) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(tensor_file_bytes(tensors, metadata))


def read_tensor_file(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise PyshimError(f"{path}: shorter than the length field")
    (head_len,) = struct.unpack_from("<Q", blob, 0)
    if head_len > len(blob) - 8:
        raise PyshimError(f"{path}: header length {head_len} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PyshimError(f"{path}: bad header: {exc}") from exc
    metadata = header.pop("__metadata__", {})
    buffer = blob[8 + head_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if entry.get("dtype") != "F32":
            raise PyshimError(f"{path}: tensor {name!r} is not F32")
        begin, end = entry["data_offsets"]
        if not (0 <= begin <= end <= len(buffer)):
            raise PyshimError(f"{path}: tensor {name!r} offsets out of range")
        tensors[name] = (
            np.frombuffer(buffer[begin:end], dtype="<f4").reshape(entry["shape"]).copy()
        )
    return tensors, metadata
