"""Procedural-state data model.

A procedural state describes one execution stage of a manipulation task as
four closed-vocabulary fields (action, entity_shape, ee_orientation,
target_point) plus a free-form subtask phrase. Only the four enumerated
fields ever participate in similarity computation; the subtask phrase is
kept for readability and debugging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .errors import ExtraKey, InvalidEnumValue, MissingKey, SchemaError

ACTIONS = ("pick", "place", "press", "push", "drag")
ENTITY_SHAPES = (
    "open_container",
    "cuboid",
    "spherical",
    "handle",
    "lying_cylindrical",
    "upright_cylindrical",
    "other",
)
EE_ORIENTATIONS = ("vertical", "horizontal")
TARGET_POINTS = (
    "front",
    "back",
    "left",
    "right",
    "center",
    "midpoint",
    "end",
    "top",
    "rim",
)

# Fields that participate in matching, in canonical order. subtask is
# deliberately absent.
MATCHED_FIELDS = ("action", "entity_shape", "ee_orientation", "target_point")
STATE_KEYS = ("subtask",) + MATCHED_FIELDS

ENUM_VALUES = {
    "action": ACTIONS,
    "entity_shape": ENTITY_SHAPES,
    "ee_orientation": EE_ORIENTATIONS,
    "target_point": TARGET_POINTS,
}


@dataclass(frozen=True)
class ProceduralState:
    """One structured execution-stage descriptor."""

    subtask: str
    action: str
    entity_shape: str
    ee_orientation: str
    target_point: str

    def __post_init__(self):
        for name in MATCHED_FIELDS:
            value = getattr(self, name)
            if value not in ENUM_VALUES[name]:
                raise InvalidEnumValue(name, value)
        if not isinstance(self.subtask, str):
            raise SchemaError(f"subtask must be a string, got {type(self.subtask).__name__}")

    def matched_fields(self) -> tuple[str, str, str, str]:
        """The four values that participate in similarity, in canonical order."""
        return (self.action, self.entity_shape, self.ee_orientation, self.target_point)

    def with_field(self, name: str, value: str) -> "ProceduralState":
        if name not in MATCHED_FIELDS:
            raise ValueError(f"not a matchable field: {name!r}")
        return replace(self, **{name: value})


@dataclass(frozen=True)
class StateSequence:
    """Ordered procedural states of one task, as registered."""

    task_id: str
    states: tuple[ProceduralState, ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if not self.states:
            raise SchemaError(f"state sequence for {self.task_id!r} is empty")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class HistoryEntry:
    """One past step: where it happened (observation ref) and what stage it was."""

    step_index: int
    observation_ref: str
    state: ProceduralState

    def __post_init__(self):
        if self.step_index < 0:
            raise SchemaError(f"step_index must be >= 0, got {self.step_index}")


def validate_state(raw: Mapping[str, object]) -> ProceduralState:
    """Validate a raw field map into a ProceduralState.

    Exactly the five schema keys must be present. Enum fields are matched
    case-insensitively after trimming; the subtask phrase passes through
    verbatim.
    """
    for key in STATE_KEYS:
        if key not in raw:
            raise MissingKey(key)
    for key in raw:
        if key not in STATE_KEYS:
            raise ExtraKey(key)

    normalized = {}
    for name in MATCHED_FIELDS:
        value = raw[name]
        if not isinstance(value, str):
            raise InvalidEnumValue(name, value)
        candidate = value.strip().lower()
        if candidate not in ENUM_VALUES[name]:
            raise InvalidEnumValue(name, value)
        normalized[name] = candidate

    subtask = raw["subtask"]
    if not isinstance(subtask, str):
        raise SchemaError(f"subtask must be a string, got {type(subtask).__name__}")
    return ProceduralState(subtask=subtask, **normalized)


def serialize_state(state: ProceduralState) -> str:
    """Canonical JSON form: flat object, the five keys in schema order."""
    return json.dumps(
        {key: getattr(state, key) for key in STATE_KEYS},
        separators=(",", ":"),
    )


def state_to_dict(state: ProceduralState) -> dict[str, str]:
    return {key: getattr(state, key) for key in STATE_KEYS}


def canonical_field_text(state: ProceduralState, field_name: str) -> str:
    """The exact text embedded for one matched field: ``"<field>: <value>"``."""
    if field_name not in MATCHED_FIELDS:
        raise ValueError(f"not a matchable field: {field_name!r}")
    return f"{field_name}: {getattr(state, field_name)}"


def all_canonical_texts() -> tuple[str, ...]:
    """Every possible canonical field text, in deterministic order.

    This is the closed vocabulary of the one-hot fixture embedder.
    """
    texts = []
    for name in MATCHED_FIELDS:
        for value in ENUM_VALUES[name]:
            texts.append(f"{name}: {value}")
    return tuple(texts)


def same_stage(a: ProceduralState, b: ProceduralState) -> bool:
    """Equality on the four matched fields only (subtask ignored)."""
    return a.matched_fields() == b.matched_fields()


def dedup_history(entries: Sequence[HistoryEntry]) -> list[HistoryEntry]:
    """Drop consecutive repeats of the same stage.

    An entry is removed when its four matched fields all equal those of the
    immediately preceding retained entry. Non-consecutive repeats survive,
    preserving the temporal order of distinct stages. Expects entries sorted
    by step_index.
    """
    out: list[HistoryEntry] = []
    for entry in entries:
        if out and same_stage(out[-1].state, entry.state):
            continue
        out.append(entry)
    return out
