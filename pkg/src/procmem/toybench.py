"""Desk-scale verification bench.

Synthetic tasks are linear policies with known target maps. Seen tasks get
low-rank deltas recovered exactly by SVD, so retrieval and fusion quality
can be measured against ground truth with no training noise. Unseen tasks
copy a seen task's target map and perturb one non-action field per state,
which makes that seen task the unique best match under one-hot matching.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .bank import Bank
from .container import AdapterSet, write_adapter
from .embed import Embedder, OneHotEmbedder
from .errors import EmptyReport, InsufficientStateGrid
from .extract import ExtractorConfig
from .fuse import ParameterHost
from .match import mean_reciprocal_rank, rank_results, task_relevance, weight_profile
from .mocks import ScriptedEnv, state_replay_transport
from .runtime import Session, SessionConfig, run_episode
from .schema import (
    ACTIONS,
    EE_ORIENTATIONS,
    ENTITY_SHAPES,
    ENUM_VALUES,
    MATCHED_FIELDS,
    TARGET_POINTS,
    ProceduralState,
    StateSequence,
)

DEFAULT_SEED = 20240817


@dataclass(frozen=True)
class SyntheticTask:
    task_id: str
    states: StateSequence
    target_map: np.ndarray
    split: str
    gold_source: Optional[str] = None


@dataclass(frozen=True)
class BenchConfig:
    seed: int = DEFAULT_SEED
    d_in: int = 24
    d_out: int = 16
    r: int = 4
    n_seen: int = 8
    n_unseen: int = 9
    states_per_task: int = 3
    k_values: tuple[int, ...] = (1, 2, 3)
    modes: tuple[str, ...] = ("factor", "delta")
    probe_count: int = 32

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(self.k_values))
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.r > min(self.d_in, self.d_out):
            raise ValueError(f"r={self.r} exceeds min(d_in, d_out)")
        if self.n_seen < 2:
            raise ValueError(f"n_seen must be >= 2, got {self.n_seen}")
        if self.states_per_task < 1:
            raise ValueError("states_per_task must be >= 1")
        if self.probe_count < 1:
            raise ValueError("probe_count must be >= 1")
        for mode in self.modes:
            if mode not in ("factor", "delta"):
                raise ValueError(f"unknown fusion mode: {mode!r}")


BENCH_CONFIG_KEYS = (
    "seed",
    "d_in",
    "d_out",
    "r",
    "n_seen",
    "n_unseen",
    "states_per_task",
    "k_values",
    "modes",
    "probe_count",
)


def load_bench_config(path: str | os.PathLike) -> BenchConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(BENCH_CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
    return BenchConfig(**raw)


_STATE_GRID = tuple(
    itertools.product(ACTIONS, ENTITY_SHAPES, EE_ORIENTATIONS, TARGET_POINTS)
)


def _make_state(combo: tuple[str, str, str, str]) -> ProceduralState:
    action, shape, orientation, point = combo
    return ProceduralState(
        subtask=f"{action} the {shape} at {point}",
        action=action,
        entity_shape=shape,
        ee_orientation=orientation,
        target_point=point,
    )


def _onehot_state_sim(query: ProceduralState, candidate: ProceduralState) -> float:
    """Field-match arithmetic equal to one-hot embedding similarity."""
    weights = weight_profile(query.action).by_field()
    return sum(
        weights[name]
        for name in MATCHED_FIELDS
        if getattr(query, name) == getattr(candidate, name)
    )


def _onehot_task_sim(query: ProceduralState, states: Sequence[ProceduralState]) -> float:
    return max(_onehot_state_sim(query, s) for s in states)


def _perturb_state(
    state: ProceduralState,
    gold_states: Sequence[ProceduralState],
    other_banks: Sequence[Sequence[ProceduralState]],
) -> Optional[ProceduralState]:
    """One-field perturbation keeping the gold memory the unique best match.

    Candidates change exactly one non-action field; the one with the
    largest positive margin over every other memory wins. Returns None when
    no candidate separates gold strictly.
    """
    best: Optional[ProceduralState] = None
    best_margin = 0.0
    for name in ("entity_shape", "ee_orientation", "target_point"):
        for value in ENUM_VALUES[name]:
            if value == getattr(state, name):
                continue
            candidate = state.with_field(name, value)
            gold_sim = _onehot_task_sim(candidate, gold_states)
            rival_sim = max(
                (_onehot_task_sim(candidate, states) for states in other_banks),
                default=0.0,
            )
            margin = gold_sim - rival_sim
            if margin > best_margin:
                best = candidate
                best_margin = margin
    return best


def generate_suite(cfg: BenchConfig) -> tuple[np.ndarray, list[SyntheticTask]]:
    """Deterministic suite of seen and unseen linear tasks.

    Seen tasks draw distinct states from the enum grid and add a random
    rank-r delta to the shared base map. Unseen tasks reuse their gold
    source's target map with perturbed states. Construction retries with a
    derived seed when a perturbation cannot isolate the gold source.
    """
    needed = cfg.n_seen * cfg.states_per_task
    if needed > len(_STATE_GRID):
        raise InsufficientStateGrid(
            f"{cfg.n_seen} tasks x {cfg.states_per_task} states need {needed} "
            f"distinct states; the enum grid has {len(_STATE_GRID)}"
        )
    for attempt in range(100):
        suite = _try_generate(cfg, attempt)
        if suite is not None:
            return suite
    raise InsufficientStateGrid(
        "could not construct unseen tasks with unique gold matches; "
        "the state grid is too crowded for this configuration"
    )


def _try_generate(cfg: BenchConfig, attempt: int) -> Optional[tuple[np.ndarray, list[SyntheticTask]]]:
    rng = np.random.default_rng([cfg.seed, attempt])
    w0 = rng.standard_normal((cfg.d_out, cfg.d_in))
    order = rng.permutation(len(_STATE_GRID))

    sigma = cfg.r ** -0.25  # keeps delta entries O(1) so f32 storage stays tight
    tasks: list[SyntheticTask] = []
    for i in range(cfg.n_seen):
        combos = [
            _STATE_GRID[order[i * cfg.states_per_task + j]]
            for j in range(cfg.states_per_task)
        ]
        states = tuple(_make_state(c) for c in combos)
        task_id = f"seen_{i:02d}"
        up = rng.standard_normal((cfg.d_out, cfg.r)) * sigma
        down = rng.standard_normal((cfg.r, cfg.d_in)) * sigma
        tasks.append(
            SyntheticTask(
                task_id=task_id,
                states=StateSequence(task_id, states),
                target_map=w0 + up @ down,
                split="seen",
            )
        )

    seen = tasks[: cfg.n_seen]
    for j in range(cfg.n_unseen):
        gold = seen[j % cfg.n_seen]
        others = [t.states.states for t in seen if t.task_id != gold.task_id]
        perturbed = []
        for state in gold.states.states:
            candidate = _perturb_state(state, gold.states.states, others)
            if candidate is None:
                return None
            perturbed.append(candidate)
        task_id = f"unseen_{j:02d}"
        tasks.append(
            SyntheticTask(
                task_id=task_id,
                states=StateSequence(task_id, tuple(perturbed)),
                target_map=gold.target_map.copy(),
                split="unseen",
                gold_source=gold.task_id,
            )
        )
    return w0, tasks


def fit_task_adapter(w0: np.ndarray, task: SyntheticTask, r: int) -> AdapterSet:
    """Best rank-r factorization of the task's delta, via SVD.

    scaling_alpha equals r so the effective scaling factor is exactly 1.
    """
    if task.split != "seen":
        raise ValueError(f"adapters are fit for seen tasks only, got {task.task_id!r}")
    delta = task.target_map.astype(np.float64) - w0.astype(np.float64)
    u, s, vt = np.linalg.svd(delta, full_matrices=False)
    sqrt_s = np.sqrt(s[:r])
    down = sqrt_s[:, None] * vt[:r]
    up = u[:, :r] * sqrt_s[None, :]
    return AdapterSet(
        adapter_id=task.task_id,
        rank=r,
        scaling_alpha=float(r),
        tensors={"policy.down": down, "policy.up": up},
    )


def build_bank(
    w0: np.ndarray,
    tasks: Sequence[SyntheticTask],
    cfg: BenchConfig,
    bank_dir: str | os.PathLike,
    embed_model_id: str = "onehot-fixture-v1",
) -> Bank:
    """Fit, serialize and register an adapter for every seen task."""
    bank = Bank.init(bank_dir, embed_model_id)
    for task in tasks:
        if task.split != "seen":
            continue
        adapter = fit_task_adapter(w0, task, cfg.r)
        path = Path(bank_dir) / "adapters" / f"{task.task_id}.lora"
        write_adapter(adapter, path)
        bank.register_memory(task.task_id, task.states, path)
    return bank


@dataclass
class BenchRow:
    task_id: str
    gold_source: str
    k: int
    mode: str
    gold_rank: int
    similarity: float
    base_error: float
    fused_error: float

    @property
    def gain(self) -> float:
        return self.base_error - self.fused_error


@dataclass
class BenchReport:
    rows: list[BenchRow]
    mrr: float
    query_ranks: list[tuple[str, int, int]]  # (task_id, state_index, gold rank)

    def row(self, task_id: str, k: int, mode: str) -> BenchRow:
        for row in self.rows:
            if (row.task_id, row.k, row.mode) == (task_id, k, mode):
                return row
        raise KeyError((task_id, k, mode))


def evaluate(
    w0: np.ndarray,
    tasks: Sequence[SyntheticTask],
    bank: Bank,
    cfg: BenchConfig,
    embedder: Optional[Embedder] = None,
) -> BenchReport:
    """Scripted episodes over every (unseen task, k, mode) cell.

    Measures the retrieval rank of the gold source, suite MRR over all
    state queries, and relative action error of the adapted policy against
    the known target map, next to the unadapted base error.
    """
    embedder = embedder or OneHotEmbedder()
    probe_rng = np.random.default_rng([cfg.seed, 104729])
    probes = probe_rng.standard_normal((cfg.d_in, cfg.probe_count))

    unseen = [t for t in tasks if t.split == "unseen"]
    bank.precompute_embeddings(embedder)

    # retrieval quality is independent of k and mode: rank once per query
    query_ranks: list[tuple[str, int, int]] = []
    mrr_inputs = []
    similarities: dict[str, float] = {}
    for task in unseen:
        sims = []
        for index, state in enumerate(task.states.states):
            ranked = rank_results(
                task_relevance(state, entry.states, embedder)
                for entry in bank.manifest.memories
            )
            ranking = [r.task_id for r in ranked]
            gold_rank = ranking.index(task.gold_source) + 1
            query_ranks.append((task.task_id, index, gold_rank))
            mrr_inputs.append((ranking, task.gold_source))
            sims.append(next(r.similarity for r in ranked if r.task_id == task.gold_source))
        similarities[task.task_id] = float(np.mean(sims))

    mrr = mean_reciprocal_rank(mrr_inputs)

    rows: list[BenchRow] = []
    for task in unseen:
        target = task.target_map @ probes
        target_norms = np.linalg.norm(target, axis=0)
        base_out = w0 @ probes
        base_error = float(
            np.mean(np.linalg.norm(base_out - target, axis=0) / target_norms)
        )
        worst_rank = max(rank for tid, _, rank in query_ranks if tid == task.task_id)
        for k in cfg.k_values:
            for mode in cfg.modes:
                fused_error = _episode_error(w0, task, bank, embedder, k, mode, probes, target)
                rows.append(
                    BenchRow(
                        task_id=task.task_id,
                        gold_source=task.gold_source,
                        k=k,
                        mode=mode,
                        gold_rank=worst_rank,
                        similarity=similarities[task.task_id],
                        base_error=base_error,
                        fused_error=fused_error,
                    )
                )
    return BenchReport(rows=rows, mrr=mrr, query_ranks=query_ranks)


def _episode_error(
    w0: np.ndarray,
    task: SyntheticTask,
    bank: Bank,
    embedder: Embedder,
    k: int,
    mode: str,
    probes: np.ndarray,
    target: np.ndarray,
) -> float:
    states = task.states.states
    host = ParameterHost({"policy": w0.copy()})
    outputs: list[np.ndarray] = []

    def act(observation, instruction):
        out = host.params["policy"] @ probes
        outputs.append(out)
        return out

    session = Session(
        bank=bank,
        embedder=embedder,
        extractor_cfg=ExtractorConfig(max_retries=0, fallback_policy="fail"),
        host=host,
        act=act,
        config=SessionConfig(k=k, temperature=1.0, fusion_mode=mode),
        transport=state_replay_transport(states),
        precompute=False,
    )
    env = ScriptedEnv(n_steps=len(states), ref_prefix=task.task_id)
    run_episode(session, env, instruction=f"perform {task.task_id}", max_chunks=len(states))

    target_norms = np.linalg.norm(target, axis=0)
    errors = [
        float(np.mean(np.linalg.norm(out - target, axis=0) / target_norms))
        for out in outputs
    ]
    return float(np.mean(errors))


@dataclass
class GainCurve:
    points: list[tuple[float, float]]
    spearman: Optional[float]


def similarity_gain_curve(report: BenchReport) -> GainCurve:
    """(similarity, gain) points sorted by similarity, plus rank correlation.

    Fewer than two points leaves the correlation undefined (None); constant
    similarity or gain series degenerate to 0.0.
    """
    if not report.rows:
        raise EmptyReport("bench report has no rows")
    points = sorted((row.similarity, row.gain) for row in report.rows)
    if len(points) < 2:
        return GainCurve(points=points, spearman=None)
    sims = [p[0] for p in points]
    gains = [p[1] for p in points]
    if len(set(sims)) == 1 or len(set(gains)) == 1:
        return GainCurve(points=points, spearman=0.0)
    rho = float(scipy_stats.spearmanr(sims, gains).statistic)
    return GainCurve(points=points, spearman=rho)


def write_outputs(report: BenchReport, curve: GainCurve, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["task_id", "gold_source", "k", "mode", "gold_rank", "similarity",
             "base_error", "fused_error", "gain"]
        )
        for row in report.rows:
            writer.writerow(
                [row.task_id, row.gold_source, row.k, row.mode, row.gold_rank,
                 f"{row.similarity:.6f}", f"{row.base_error:.8f}",
                 f"{row.fused_error:.8f}", f"{row.gain:.8f}"]
            )

    with open(out / "similarity_gain.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["similarity", "gain"])
        for sim, gain in curve.points:
            writer.writerow([f"{sim:.6f}", f"{gain:.8f}"])

    lines = [
        f"suite MRR: {report.mrr:.6f}",
        f"queries: {len(report.query_ranks)}",
        f"similarity-gain spearman: "
        + ("n/a" if curve.spearman is None else f"{curve.spearman:.4f}"),
        "",
        f"{'k':>3} {'mode':<8} {'mean fused_error':>18} {'mean gain':>12}",
    ]
    ks = sorted({row.k for row in report.rows})
    modes = sorted({row.mode for row in report.rows})
    for k in ks:
        for mode in modes:
            cell = [r for r in report.rows if r.k == k and r.mode == mode]
            mean_err = float(np.mean([r.fused_error for r in cell]))
            mean_gain = float(np.mean([r.gain for r in cell]))
            lines.append(f"{k:>3} {mode:<8} {mean_err:>18.8f} {mean_gain:>12.8f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_bench(
    cfg: BenchConfig,
    out_dir: str | os.PathLike,
    embedder: Optional[Embedder] = None,
) -> tuple[BenchReport, GainCurve]:
    """Generate, build the bank, evaluate, and write the report files."""
    out = Path(out_dir)
    w0, tasks = generate_suite(cfg)
    bank = build_bank(w0, tasks, cfg, out / "bank",
                      embed_model_id=(embedder or OneHotEmbedder()).model_id)
    report = evaluate(w0, tasks, bank, cfg, embedder=embedder)
    curve = similarity_gain_curve(report)
    write_outputs(report, curve, out)
    return report, curve
