"""Single-file tensor container for low-rank adapter sets.

Layout (compatible with the de-facto single-file ML tensor format):

    bytes 0..7    unsigned 64-bit little-endian header length N
    bytes 8..8+N  UTF-8 JSON header: tensor name -> {dtype, shape,
                  data_offsets}, plus a "__metadata__" string map
    rest          raw little-endian float32 buffer

Offsets are relative to the buffer start, contiguous and ascending in
lexicographic tensor-name order; header keys are sorted with no
insignificant whitespace, so a given adapter set always serializes to the
same bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader,
    InvariantViolation,
    IoError,
    OffsetOutOfBounds,
    PairingError,
    UnsupportedDtype,
)

DOWN_SUFFIX = ".down"
UP_SUFFIX = ".up"


@dataclass
class AdapterSet:
    """Named low-rank factor pairs plus rank and scaling constant.

    Tensor names follow ``<layer>.down`` with shape (r, d_in) and
    ``<layer>.up`` with shape (d_out, r); data is float32 row-major.
    """

    adapter_id: str
    rank: int
    scaling_alpha: float
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        self.tensors = {
            name: np.ascontiguousarray(np.asarray(data, dtype=np.float32))
            for name, data in self.tensors.items()
        }

    @property
    def scaling(self) -> float:
        """Effective multiplier applied to up @ down."""
        return self.scaling_alpha / self.rank

    def layer_names(self) -> list[str]:
        return sorted({_base_name(name) for name in self.tensors})

    def factors(self, layer: str) -> tuple[np.ndarray, np.ndarray]:
        """(down, up) for one layer."""
        return self.tensors[layer + DOWN_SUFFIX], self.tensors[layer + UP_SUFFIX]


def _base_name(tensor_name: str) -> str:
    for suffix in (DOWN_SUFFIX, UP_SUFFIX):
        if tensor_name.endswith(suffix):
            return tensor_name[: -len(suffix)]
    raise PairingError(f"tensor name lacks a .down/.up role suffix: {tensor_name!r}")


def validate_adapter_set(adapter: AdapterSet) -> None:
    """Check pairing, shapes, rank consistency and finiteness."""
    if not adapter.adapter_id:
        raise InvariantViolation("adapter_id must be non-empty")
    if adapter.rank <= 0:
        raise InvariantViolation(f"rank must be > 0, got {adapter.rank}")
    if not math.isfinite(adapter.scaling_alpha):
        raise InvariantViolation("scaling_alpha must be finite")
    if not adapter.tensors:
        raise PairingError("adapter has no tensors")

    layers: dict[str, dict[str, np.ndarray]] = {}
    for name, data in adapter.tensors.items():
        base = _base_name(name)
        role = "down" if name.endswith(DOWN_SUFFIX) else "up"
        layers.setdefault(base, {})[role] = data
        if not np.all(np.isfinite(data)):
            raise InvariantViolation(f"tensor {name!r} contains non-finite values")

    for base, roles in sorted(layers.items()):
        if "down" not in roles:
            raise PairingError(f"layer {base!r} has up without down")
        if "up" not in roles:
            raise PairingError(f"layer {base!r} has down without up")
        down, up = roles["down"], roles["up"]
        if down.ndim != 2 or up.ndim != 2:
            raise PairingError(f"layer {base!r} factors must be matrices")
        if down.shape[0] != adapter.rank or up.shape[1] != adapter.rank:
            raise PairingError(
                f"layer {base!r} factor ranks {down.shape[0]}/{up.shape[1]} "
                f"do not match adapter rank {adapter.rank}"
            )


def write_container(
    tensors: dict[str, np.ndarray],
    metadata: dict[str, str],
    path: str | os.PathLike,
) -> None:
    """Serialize float32 tensors plus string metadata; byte-deterministic."""
    data = to_container_bytes(tensors, metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
    except OSError as exc:
        raise IoError(f"cannot write container {path}: {exc}") from exc


def to_container_bytes(tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> bytes:
    header: dict[str, object] = {"__metadata__": dict(metadata)}
    buffer = bytearray()
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        raw = arr.tobytes(order="C")
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        buffer.extend(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(buffer)


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse and structurally validate a container file."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read container {path}: {exc}") from exc
    return from_container_bytes(blob)


def from_container_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(blob) < 8:
        raise CorruptHeader("container shorter than the 8-byte length field")
    (header_len,) = struct.unpack_from("<Q", blob, 0)
    if header_len > len(blob) - 8:
        raise CorruptHeader(
            f"declared header length {header_len} exceeds file payload {len(blob) - 8}"
        )
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptHeader("header JSON is not an object")

    metadata = header.pop("__metadata__", None)
    if metadata is None:
        raise CorruptHeader("header lacks the __metadata__ object")
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CorruptHeader("__metadata__ must map strings to strings")

    buffer = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int, str]] = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise CorruptHeader(f"tensor entry {name!r} is not an object")
        dtype = entry.get("dtype")
        if dtype != "F32":
            raise UnsupportedDtype(f"tensor {name!r} has dtype {dtype!r}; only F32 is supported")
        shape = entry.get("shape")
        if (
            not isinstance(shape, list)
            or not all(isinstance(d, int) and d >= 0 for d in shape)
        ):
            raise CorruptHeader(f"tensor {name!r} has a malformed shape")
        offsets = entry.get("data_offsets")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise CorruptHeader(f"tensor {name!r} has malformed data_offsets")
        begin, end = offsets
        if begin < 0 or end < begin or end > len(buffer):
            raise OffsetOutOfBounds(
                f"tensor {name!r} offsets [{begin}, {end}) exceed buffer of {len(buffer)} bytes"
            )
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if end - begin != expected:
            raise OffsetOutOfBounds(
                f"tensor {name!r} spans {end - begin} bytes but shape {shape} needs {expected}"
            )
        spans.append((begin, end, name))
        arr = np.frombuffer(buffer[begin:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32, copy=True)

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OffsetOutOfBounds(f"tensors {n0!r} and {n1!r} overlap in the buffer")
    return tensors, metadata


def write_adapter(adapter: AdapterSet, path: str | os.PathLike) -> None:
    """Write an adapter set; the file is byte-deterministic for a given set."""
    validate_adapter_set(adapter)
    metadata = {
        "adapter_id": adapter.adapter_id,
        "rank": str(adapter.rank),
        "scaling_alpha": repr(float(adapter.scaling_alpha)),
    }
    write_container(adapter.tensors, metadata, path)


def adapter_to_bytes(adapter: AdapterSet) -> bytes:
    validate_adapter_set(adapter)
    metadata = {
        "adapter_id": adapter.adapter_id,
        "rank": str(adapter.rank),
        "scaling_alpha": repr(float(adapter.scaling_alpha)),
    }
    return to_container_bytes(adapter.tensors, metadata)


def read_adapter(path: str | os.PathLike) -> AdapterSet:
    """Read and fully validate an adapter set container."""
    tensors, metadata = read_container(path)
    return adapter_from_parts(tensors, metadata)


def adapter_from_bytes(blob: bytes) -> AdapterSet:
    tensors, metadata = from_container_bytes(blob)
    return adapter_from_parts(tensors, metadata)


def adapter_from_parts(tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> AdapterSet:
    for key in ("adapter_id", "rank", "scaling_alpha"):
        if key not in metadata:
            raise CorruptHeader(f"__metadata__ lacks {key!r}")
    try:
        rank = int(metadata["rank"])
        scaling_alpha = float(metadata["scaling_alpha"])
    except ValueError as exc:
        raise CorruptHeader(f"non-numeric rank/scaling_alpha metadata: {exc}") from exc

    adapter = AdapterSet(
        adapter_id=metadata["adapter_id"],
        rank=rank,
        scaling_alpha=scaling_alpha,
        tensors=tensors,
    )
    validate_adapter_set(adapter)
    return adapter
