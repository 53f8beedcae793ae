"""Export low-rank adapters from training checkpoints into the bank format.

Sources can be numpy archives (``.npz``) or files already in the tensor
container layout (e.g. ``.safetensors`` adapters saved by common PEFT
stacks). The mapping renames each source tensor to a bank layer plus a
down/up role; nothing outside the mapping is exported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_tensor_file, write_tensor_file
from .errors import MappingIncomplete, ShapeMismatch


@dataclass(frozen=True)
class MappingRule:
    source: str
    layer: str
    role: str  # "down" | "up"

    def __post_init__(self):
        if self.role not in ("down", "up"):
            raise ValueError(f"role must be down or up, got {self.role!r}")


@dataclass(frozen=True)
class ExportSpec:
    source: str
    adapter_id: str
    rank: int
    scaling_alpha: float
    mapping: tuple[MappingRule, ...]

    def __post_init__(self):
        if self.rank <= 0:
            raise ValueError(f"rank must be > 0, got {self.rank}")
        if not self.mapping:
            raise ValueError("mapping must not be empty")


def load_export_spec(path) -> ExportSpec:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    rules = tuple(
        MappingRule(source=m["source"], layer=m["layer"], role=m["role"])
        for m in raw["mapping"]
    )
    return ExportSpec(
        source=raw["source"],
        adapter_id=raw["adapter_id"],
        rank=int(raw["rank"]),
        scaling_alpha=float(raw["scaling_alpha"]),
        mapping=rules,
    )


def _load_source(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as archive:
            return {name: np.asarray(archive[name]) for name in archive.files}
    tensors, _metadata = read_tensor_file(path)
    return tensors


def export_adapter(spec: ExportSpec, out_path) -> None:
    """Write a container byte-compatible with the engine's adapter codec."""
    source = _load_source(spec.source)

    tensors: dict[str, np.ndarray] = {}
    layers: dict[str, set[str]] = {}
    for rule in spec.mapping:
        if rule.source not in source:
            raise MappingIncomplete(
                f"source tensor {rule.source!r} not found in {spec.source}"
            )
        arr = np.asarray(source[rule.source], dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeMismatch(f"{rule.source!r} is not a matrix: shape {arr.shape}")
        rank_axis = 0 if rule.role == "down" else 1
        if arr.shape[rank_axis] != spec.rank:
            raise ShapeMismatch(
                f"{rule.source!r} ({rule.role}) has shape {arr.shape}; "
                f"axis {rank_axis} must equal rank {spec.rank}"
            )
        tensors[f"{rule.layer}.{rule.role}"] = arr
        layers.setdefault(rule.layer, set()).add(rule.role)

    for layer, roles in sorted(layers.items()):
        missing = {"down", "up"} - roles
        if missing:
            raise MappingIncomplete(f"layer {layer!r} lacks its {missing.pop()} factor")

    metadata = {
        "adapter_id": spec.adapter_id,
        "rank": str(spec.rank),
        "scaling_alpha": repr(float(spec.scaling_alpha)),
    }
    write_tensor_file(tensors, metadata, out_path)
