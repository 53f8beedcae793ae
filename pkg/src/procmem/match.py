"""Action-aware procedural matching.

Similarity between two procedural states is a weighted sum of per-field
cosine similarities, where the query's action value selects the weight
profile. A memory's task-level relevance is the best-matched state of its
sequence; the retrieved top-k scores are turned into fusion coefficients
by a softmax over the selected set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .embed import Embedder, cosine
from .errors import EmptyBank, GoldNotFound
from .schema import (
    ACTIONS,
    MATCHED_FIELDS,
    ProceduralState,
    StateSequence,
    canonical_field_text,
)

DEFAULT_WEIGHT_EMPHASIZED = 0.35
DEFAULT_WEIGHT = 0.15

# Which field gets the emphasized weight for which query action. Actions
# without an entry (press, drag) keep the default profile, where only the
# action field itself is emphasized.
EMPHASIZED_FIELD = {
    "pick": "entity_shape",
    "place": "target_point",
    "push": "ee_orientation",
}


@dataclass(frozen=True)
class WeightProfile:
    """Per-field non-negative weights, a pure function of the query action."""

    w_a: float
    w_o: float
    w_e: float
    w_p: float

    def __post_init__(self):
        for w in (self.w_a, self.w_o, self.w_e, self.w_p):
            if w < 0:
                raise ValueError(f"weights must be non-negative, got {w}")

    def by_field(self) -> dict[str, float]:
        return {
            "action": self.w_a,
            "entity_shape": self.w_o,
            "ee_orientation": self.w_e,
            "target_point": self.w_p,
        }

    def dot(self, field_sims: dict[str, float]) -> float:
        weights = self.by_field()
        return sum(weights[name] * field_sims[name] for name in MATCHED_FIELDS)


@dataclass(frozen=True)
class MatchResult:
    """Relevance of one memory for one query state."""

    task_id: str
    similarity: float
    best_state_index: int
    field_sims: dict[str, float]


@dataclass(frozen=True)
class FusionPlan:
    """The executable recipe for one adaptation step."""

    selected: tuple[str, ...]
    weights: tuple[float, ...]
    mode: str
    temperature: float

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(self.selected))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.selected) != len(self.weights):
            raise ValueError("selected ids and weights differ in length")
        if not self.selected:
            raise ValueError("fusion plan is empty")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if any(w <= 0 for w in self.weights):
            raise ValueError("fusion weights must all be > 0")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {sum(self.weights)!r}")
        if self.mode not in ("factor", "delta"):
            raise ValueError(f"unknown fusion mode: {self.mode!r}")


def weight_profile(query_action: str) -> WeightProfile:
    """The action-conditioned weight profile.

    The action field always carries the emphasized weight; pick, place and
    push additionally emphasize the field coupled with that action. Weights
    are used exactly as tabulated, without renormalization.
    """
    if query_action not in ACTIONS:
        raise ValueError(f"unknown action: {query_action!r}")
    weights = {
        "action": DEFAULT_WEIGHT_EMPHASIZED,
        "entity_shape": DEFAULT_WEIGHT,
        "ee_orientation": DEFAULT_WEIGHT,
        "target_point": DEFAULT_WEIGHT,
    }
    emphasized = EMPHASIZED_FIELD.get(query_action)
    if emphasized is not None:
        weights[emphasized] = DEFAULT_WEIGHT_EMPHASIZED
    return WeightProfile(
        w_a=weights["action"],
        w_o=weights["entity_shape"],
        w_e=weights["ee_orientation"],
        w_p=weights["target_point"],
    )


def state_similarity(
    query: ProceduralState,
    candidate: ProceduralState,
    embedder: Embedder,
) -> tuple[float, dict[str, float]]:
    """Weighted sum of per-field embedding cosines; subtask excluded."""
    profile = weight_profile(query.action)
    field_sims: dict[str, float] = {}
    for name in MATCHED_FIELDS:
        u = embedder.embed(canonical_field_text(query, name))
        v = embedder.embed(canonical_field_text(candidate, name))
        field_sims[name] = cosine(u, v)
    return profile.dot(field_sims), field_sims


def task_relevance(
    query: ProceduralState,
    memory: StateSequence,
    embedder: Embedder,
) -> MatchResult:
    """Best-matched-state relevance; earliest state wins ties."""
    best_sim = -math.inf
    best_index = 0
    best_fields: dict[str, float] = {}
    for index, state in enumerate(memory.states):
        sim, field_sims = state_similarity(query, state, embedder)
        if sim > best_sim:
            best_sim = sim
            best_index = index
            best_fields = field_sims
    return MatchResult(
        task_id=memory.task_id,
        similarity=best_sim,
        best_state_index=best_index,
        field_sims=best_fields,
    )


def rank_results(results: Iterable[MatchResult]) -> list[MatchResult]:
    """Similarity-descending order; ties broken by ascending task id."""
    return sorted(results, key=lambda r: (-r.similarity, r.task_id))


def select_top_k(
    results: Sequence[MatchResult],
    k: int,
    temperature: float = 1.0,
    mode: str = "factor",
) -> FusionPlan:
    """Pick the top min(k, n) memories and softmax their similarities.

    The softmax runs over the selected set only, at the given temperature;
    k larger than the bank clamps to the bank size.
    """
    if not results:
        raise EmptyBank("no match results to select from")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    ranked = rank_results(results)[: min(k, len(results))]
    scaled = [r.similarity / temperature for r in ranked]
    peak = max(scaled)
    exps = [math.exp(s - peak) for s in scaled]
    total = sum(exps)
    # softmax is strictly positive; keep that true under float underflow at
    # extreme temperatures (the floor is far below every test tolerance)
    weights = [max(e / total, 1e-300) for e in exps]
    return FusionPlan(
        selected=tuple(r.task_id for r in ranked),
        weights=tuple(weights),
        mode=mode,
        temperature=temperature,
    )


def mean_reciprocal_rank(ranked_lists: Sequence[tuple[Sequence[str], str]]) -> float:
    """MRR over (ranking, gold id) pairs; ranks are 1-based."""
    if not ranked_lists:
        raise ValueError("MRR over zero queries is undefined")
    total = 0.0
    for ranking, gold in ranked_lists:
        try:
            rank = list(ranking).index(gold) + 1
        except ValueError:
            raise GoldNotFound(f"gold task {gold!r} absent from ranking") from None
        total += 1.0 / rank
    return total / len(ranked_lists)
