"""Procedural-memory engine for adaptive policies.

Stores per-task low-rank adapter sets indexed by structured procedural
states, retrieves the most relevant memories for a query state by
action-aware weighted similarity, fuses them by softmax-weighted
summation, and applies/reverts the fused adapter around each action chunk.
"""

from .bank import Bank, BankManifest, BankReport, MemoryEntry
from .container import AdapterSet, read_adapter, write_adapter
from .embed import (
    CachedEmbedder,
    EmbedCache,
    EmbeddingVector,
    HashedEmbedder,
    OneHotEmbedder,
    RemoteEmbedder,
    cosine,
    hashed_fixture_embedder,
    onehot_fixture_embedder,
)
from .extract import (
    BASE_ONLY,
    ExtractionRequest,
    ExtractorConfig,
    Observation,
    build_prompt,
    extract_state,
    record_step,
)
from .fuse import FusedAdapter, ParameterHost, fuse, fuse_delta, fuse_factor, write_fused
from .match import (
    FusionPlan,
    MatchResult,
    WeightProfile,
    mean_reciprocal_rank,
    select_top_k,
    state_similarity,
    task_relevance,
    weight_profile,
)
from .runtime import Session, SessionConfig, StepTrace, run_episode, summarize_latency
from .schema import (
    HistoryEntry,
    ProceduralState,
    StateSequence,
    canonical_field_text,
    dedup_history,
    serialize_state,
    validate_state,
)

__version__ = "0.1.0"
