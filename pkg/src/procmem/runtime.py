"""Online per-chunk adaptation loop.

Each action chunk runs extract -> retrieve -> fuse -> apply -> act ->
revert. When the extracted stage equals the previous chunk's, the previous
fused adapter is reused without re-retrieval. The host is guaranteed clean
after every chunk, including on errors raised after application.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .bank import Bank
from .embed import CachedEmbedder, Embedder
from .errors import EmptyInput, EpisodeError, ProcmemError
from .extract import (
    BASE_ONLY,
    ExtractionRequest,
    ExtractorConfig,
    Observation,
    VLMTransport,
    extract_state,
    record_step,
)
from .fuse import FusedAdapter, ParameterHost, fuse
from .match import FusionPlan, MatchResult, rank_results, select_top_k, task_relevance
from .schema import HistoryEntry, ProceduralState, same_stage


@dataclass(frozen=True)
class SessionConfig:
    k: int = 1
    temperature: float = 1.0
    fusion_mode: str = "factor"
    base_merged: bool = False
    reuse_enabled: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.fusion_mode not in ("factor", "delta"):
            raise ValueError(f"unknown fusion mode: {self.fusion_mode!r}")


@dataclass
class StepTrace:
    chunk_index: int
    state: Optional[ProceduralState]
    plan: Optional[FusionPlan]
    timings: dict[str, float]
    reused: bool


@dataclass
class EpisodeTrace:
    steps: list[StepTrace]
    status: str  # "done" | "max_chunks"


@dataclass
class PolicyHostBinding:
    """The policy side of a session: weights plus the act function."""

    host: ParameterHost
    act: Callable[[Observation, str], object]
    chunk_index: int = 0


class Session:
    """One episode-scoped adaptation session owning one host."""

    def __init__(
        self,
        bank: Bank,
        embedder: Embedder,
        extractor_cfg: ExtractorConfig,
        host: ParameterHost,
        act: Callable[[Observation, str], object],
        config: SessionConfig = SessionConfig(),
        transport: Optional[VLMTransport] = None,
        precompute: bool = True,
    ):
        self.bank = bank
        self.embedder = embedder
        self.extractor_cfg = extractor_cfg
        self.transport = transport
        self.binding = PolicyHostBinding(host=host, act=act)
        self.config = config
        self.history: list[HistoryEntry] = []
        self._prev_state: Optional[ProceduralState] = None
        self._prev_plan: Optional[FusionPlan] = None
        self._prev_fused: Optional[FusedAdapter] = None
        if precompute:
            bank.precompute_embeddings(embedder)
        if config.base_merged:
            base = bank.base_adapter()
            if base is not None:
                plan = FusionPlan(("__base__",), (1.0,), "factor", 1.0)
                fused = FusedAdapter(
                    mode="factor",
                    provenance_tasks=plan.selected,
                    provenance_weights=plan.weights,
                    factor_set=base,
                )
                self.binding.host.merge_permanently(fused)

    def retrieve(self, state: ProceduralState) -> list[MatchResult]:
        """Task relevance of every memory for one query state, ranked."""
        results = [
            task_relevance(state, entry.states, self.embedder)
            for entry in self.bank.manifest.memories
        ]
        return rank_results(results)

    def run_chunk(self, observation: Observation, instruction: str) -> tuple[object, StepTrace]:
        host = self.binding.host
        if host.staged is not None:
            raise ProcmemError("host is not idle: a fused adapter is still staged")
        chunk_index = self.binding.chunk_index
        timings = {key: 0.0 for key in ("extract_ms", "retrieve_ms", "fuse_ms", "apply_ms", "act_ms", "revert_ms")}

        start = time.perf_counter()
        state = extract_state(
            ExtractionRequest(observation=observation, instruction=instruction, history=tuple(self.history)),
            self.extractor_cfg,
            transport=self.transport,
        )
        timings["extract_ms"] = (time.perf_counter() - start) * 1000.0

        if state is BASE_ONLY:
            start = time.perf_counter()
            chunk = self.binding.act(observation, instruction)
            timings["act_ms"] = (time.perf_counter() - start) * 1000.0
            trace = StepTrace(chunk_index, None, None, timings, reused=False)
            self._prev_state = None
            self._prev_plan = None
            self._prev_fused = None
            self.binding.chunk_index += 1
            return chunk, trace

        reused = (
            self.config.reuse_enabled
            and self._prev_state is not None
            and self._prev_fused is not None
            and same_stage(self._prev_state, state)
        )
        if reused:
            plan = self._prev_plan
            fused = self._prev_fused
        else:
            start = time.perf_counter()
            results = self.retrieve(state)
            plan = select_top_k(
                results,
                k=self.config.k,
                temperature=self.config.temperature,
                mode=self.config.fusion_mode,
            )
            timings["retrieve_ms"] = (time.perf_counter() - start) * 1000.0

            start = time.perf_counter()
            sets = [self.bank.adapter_set(task_id) for task_id in plan.selected]
            fused = fuse(plan, sets)
            timings["fuse_ms"] = (time.perf_counter() - start) * 1000.0

        start = time.perf_counter()
        host.apply(fused)
        timings["apply_ms"] = (time.perf_counter() - start) * 1000.0

        try:
            start = time.perf_counter()
            chunk = self.binding.act(observation, instruction)
            timings["act_ms"] = (time.perf_counter() - start) * 1000.0
        except BaseException:
            host.revert()  # never leave the host adapted
            raise

        start = time.perf_counter()
        host.revert()
        timings["revert_ms"] = (time.perf_counter() - start) * 1000.0

        self.history = record_step(self.history, chunk_index, observation.ref, state)
        self._prev_state = state
        self._prev_plan = plan
        self._prev_fused = fused
        self.binding.chunk_index += 1
        return chunk, StepTrace(chunk_index, state, plan, timings, reused=reused)


def run_episode(session: Session, env_adapter, instruction: str, max_chunks: int) -> EpisodeTrace:
    """Loop run_chunk until the environment signals done or the cap hits."""
    if max_chunks < 1:
        raise ValueError(f"max_chunks must be >= 1, got {max_chunks}")
    steps: list[StepTrace] = []
    for _ in range(max_chunks):
        observation = env_adapter.observe()
        try:
            chunk, trace = session.run_chunk(observation, instruction)
        except ProcmemError as exc:
            raise EpisodeError(f"episode aborted at chunk {len(steps)}: {exc}", steps) from exc
        steps.append(trace)
        if env_adapter.submit(chunk):
            return EpisodeTrace(steps=steps, status="done")
    return EpisodeTrace(steps=steps, status="max_chunks")


@dataclass
class PhaseStats:
    phase: str
    mean_ms: float
    p95_ms: float


@dataclass
class LatencyReport:
    phases: list[PhaseStats]
    chunks: int
    reused_chunks: int
    embed_calls: int = 0
    embed_cache_hits: int = 0
    embed_api_mean_ms: Optional[float] = None

    def render(self) -> str:
        lines = [f"{'phase':<12} {'mean_ms':>10} {'p95_ms':>10}"]
        for row in self.phases:
            lines.append(f"{row.phase:<12} {row.mean_ms:>10.2f} {row.p95_ms:>10.2f}")
        lines.append(f"chunks: {self.chunks}, adapter reuses: {self.reused_chunks}")
        lines.append(f"embed calls: {self.embed_calls}, cache hits: {self.embed_cache_hits}")
        if self.embed_api_mean_ms is not None:
            lines.append(f"embed api call mean_ms: {self.embed_api_mean_ms:.2f}")
        return "\n".join(lines)


def _p95(values: Sequence[float]) -> float:
    ordered = sorted(values)
    index = max(0, int(np.ceil(0.95 * len(ordered))) - 1)
    return ordered[index]


def summarize_latency(traces: Sequence[StepTrace], embedder: Optional[Embedder] = None) -> LatencyReport:
    """Per-phase means and p95s plus cache and reuse counters."""
    if not traces:
        raise EmptyInput("no traces to summarize")
    phases = []
    for key in ("extract_ms", "retrieve_ms", "fuse_ms", "apply_ms", "act_ms", "revert_ms"):
        values = [t.timings[key] for t in traces]
        phases.append(
            PhaseStats(
                phase=key[: -len("_ms")],
                mean_ms=float(np.mean(values)),
                p95_ms=_p95(values),
            )
        )
    report = LatencyReport(
        phases=phases,
        chunks=len(traces),
        reused_chunks=sum(1 for t in traces if t.reused),
    )
    if isinstance(embedder, CachedEmbedder):
        report.embed_calls = len(embedder.stats.calls)
        report.embed_cache_hits = embedder.stats.hits
        misses = embedder.stats.miss_latencies_ms()
        if misses:
            report.embed_api_mean_ms = float(np.mean(misses))
    return report
