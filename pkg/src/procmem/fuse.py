"""Adapter fusion and host application.

Two fusion modes are supported. Factor mode is the literal weighted sum of
the adapters' down/up factor tensors; delta mode is the weighted sum of the
materialized effective weight deltas (scaling * up @ down). The two agree
for a single memory and provably diverge for two or more.

Application uses snapshot-restore: the exact pre-application bytes of every
touched matrix are kept, so unload restores the host bitwise regardless of
floating-point non-associativity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .container import AdapterSet, write_adapter, write_container
from .errors import (
    AlreadyApplied,
    IncompatibleAdapters,
    NothingApplied,
    ShapeMismatch,
    UnknownLayer,
)
from .match import FusionPlan

DELTA_SUFFIX = ".delta"


@dataclass
class FusedAdapter:
    """One fused adapter plus the plan that produced it."""

    mode: str
    provenance_tasks: tuple[str, ...]
    provenance_weights: tuple[float, ...]
    factor_set: Optional[AdapterSet] = None
    deltas: Optional[dict[str, np.ndarray]] = None

    def __post_init__(self):
        if self.mode == "factor" and self.factor_set is None:
            raise ValueError("factor mode requires a factor_set")
        if self.mode == "delta" and self.deltas is None:
            raise ValueError("delta mode requires deltas")
        total = sum(self.provenance_weights)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"provenance weights must sum to 1, got {total!r}")

    def layer_deltas(self) -> dict[str, np.ndarray]:
        """Effective per-layer weight deltas, in double precision."""
        if self.mode == "delta":
            assert self.deltas is not None
            return {name: np.asarray(d, dtype=np.float64) for name, d in self.deltas.items()}
        assert self.factor_set is not None
        out = {}
        for layer in self.factor_set.layer_names():
            down, up = self.factor_set.factors(layer)
            out[layer] = self.factor_set.scaling * (
                up.astype(np.float64) @ down.astype(np.float64)
            )
        return out


def _aligned(plan: FusionPlan, sets: Sequence[AdapterSet]) -> list[tuple[str, float, AdapterSet]]:
    if len(sets) != len(plan.weights):
        raise ValueError(
            f"plan selects {len(plan.weights)} memories but {len(sets)} adapter sets given"
        )
    triples = list(zip(plan.selected, plan.weights, sets))
    # fixed summation order for reproducibility under plan permutation
    triples.sort(key=lambda t: t[0])
    return triples


def fuse_factor(plan: FusionPlan, sets: Sequence[AdapterSet]) -> FusedAdapter:
    """Parameter-wise weighted sum of the factor tensors.

    All sets must share tensor names, ranks and shapes. Accumulation is in
    double precision, in ascending task-id order; the result is stored as
    float32 like any adapter set.
    """
    triples = _aligned(plan, sets)
    _, _, first = triples[0]
    names = set(first.tensors)
    for task_id, _, adapter in triples[1:]:
        if set(adapter.tensors) != names:
            raise IncompatibleAdapters(
                f"adapter for {task_id!r} has a different tensor name set"
            )
        if adapter.rank != first.rank:
            raise IncompatibleAdapters(
                f"adapter for {task_id!r} has rank {adapter.rank}, expected {first.rank}"
            )
        for name in names:
            if adapter.tensors[name].shape != first.tensors[name].shape:
                raise IncompatibleAdapters(
                    f"tensor {name!r} shape differs for {task_id!r}"
                )

    fused_tensors = {}
    for name in sorted(names):
        acc = np.zeros(first.tensors[name].shape, dtype=np.float64)
        for _, weight, adapter in triples:
            acc += weight * adapter.tensors[name].astype(np.float64)
        fused_tensors[name] = acc.astype(np.float32)

    fused_set = AdapterSet(
        adapter_id="fused:" + "+".join(plan.selected),
        rank=first.rank,
        scaling_alpha=first.scaling_alpha,
        tensors=fused_tensors,
    )
    return FusedAdapter(
        mode="factor",
        provenance_tasks=plan.selected,
        provenance_weights=plan.weights,
        factor_set=fused_set,
    )


def fuse_delta(plan: FusionPlan, sets: Sequence[AdapterSet]) -> FusedAdapter:
    """Weighted sum of materialized effective deltas.

    Ranks may differ across sets; per-layer output/input dimensions must
    agree. Depends only on each adapter's effective product, not on its
    factorization.
    """
    triples = _aligned(plan, sets)
    layer_names = set(triples[0][2].layer_names())
    for task_id, _, adapter in triples[1:]:
        if set(adapter.layer_names()) != layer_names:
            raise ShapeMismatch(f"adapter for {task_id!r} has a different layer set")

    deltas: dict[str, np.ndarray] = {}
    for layer in sorted(layer_names):
        acc = None
        for task_id, weight, adapter in triples:
            down, up = adapter.factors(layer)
            delta = adapter.scaling * (up.astype(np.float64) @ down.astype(np.float64))
            if acc is None:
                acc = weight * delta
            elif acc.shape != delta.shape:
                raise ShapeMismatch(
                    f"layer {layer!r} delta shape {delta.shape} for {task_id!r} "
                    f"differs from {acc.shape}"
                )
            else:
                acc += weight * delta
        deltas[layer] = acc
    return FusedAdapter(
        mode="delta",
        provenance_tasks=plan.selected,
        provenance_weights=plan.weights,
        deltas=deltas,
    )


def fuse(plan: FusionPlan, sets: Sequence[AdapterSet]) -> FusedAdapter:
    if plan.mode == "factor":
        return fuse_factor(plan, sets)
    return fuse_delta(plan, sets)


class ParameterHost:
    """Named dense weight matrices with at most one staged fused adapter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {name: np.array(w) for name, w in params.items()}
        self.staged: Optional[dict[str, np.ndarray]] = None

    def apply(self, fused: FusedAdapter) -> None:
        """Add the fused deltas onto the host weights.

        Validates every layer before touching any, snapshots the exact
        pre-application arrays, then updates in double precision and casts
        back to each matrix's dtype.
        """
        if self.staged is not None:
            raise AlreadyApplied("a fused adapter is already applied to this host")
        deltas = fused.layer_deltas()
        for layer, delta in deltas.items():
            if layer not in self.params:
                raise UnknownLayer(layer)
            if self.params[layer].shape != delta.shape:
                raise ShapeMismatch(
                    f"layer {layer!r}: host shape {self.params[layer].shape} "
                    f"vs delta shape {delta.shape}"
                )
        snapshot = {layer: self.params[layer].copy() for layer in deltas}
        for layer, delta in deltas.items():
            current = self.params[layer]
            self.params[layer] = (current.astype(np.float64) + delta).astype(current.dtype)
        self.staged = snapshot

    def revert(self) -> None:
        """Restore the recorded pre-application bytes and clear the stage."""
        if self.staged is None:
            raise NothingApplied("no fused adapter is applied to this host")
        for layer, snapshot in self.staged.items():
            self.params[layer] = snapshot
        self.staged = None

    def merge_permanently(self, fused: FusedAdapter) -> None:
        """Fold deltas into the weights with no snapshot (not revertible)."""
        if self.staged is not None:
            raise AlreadyApplied("cannot merge while an adapter is staged")
        for layer, delta in fused.layer_deltas().items():
            if layer not in self.params:
                raise UnknownLayer(layer)
            current = self.params[layer]
            self.params[layer] = (current.astype(np.float64) + delta).astype(current.dtype)


def write_fused(fused: FusedAdapter, path) -> None:
    """Serialize a fused adapter to a container file.

    Factor mode reuses the adapter-set codec; delta mode writes one
    ``<layer>.delta`` tensor per layer with provenance in the metadata.
    """
    if fused.mode == "factor":
        assert fused.factor_set is not None
        write_adapter(fused.factor_set, path)
        return
    assert fused.deltas is not None
    tensors = {
        layer + DELTA_SUFFIX: delta.astype(np.float32)
        for layer, delta in fused.deltas.items()
    }
    metadata = {
        "adapter_id": "fused:" + "+".join(fused.provenance_tasks),
        "mode": "delta",
        "provenance_tasks": json.dumps(list(fused.provenance_tasks)),
        "provenance_weights": json.dumps([repr(w) for w in fused.provenance_weights]),
    }
    write_container(tensors, metadata, path)
