"""Acceptance criteria A1-A10.

Each test prints one pass/fail line. Expected values come from independent
oracles computed inside this module (hand arithmetic, brute-force
enumeration over memory similarities, direct field-match counting), never
from the code paths under test.
"""

import json
import struct
import time

import numpy as np
import pytest

from procmem.bank import Bank
from procmem.container import (
    AdapterSet,
    adapter_from_bytes,
    adapter_to_bytes,
    read_adapter,
    write_adapter,
)
from procmem.embed import CachedEmbedder, EmbedCache, OneHotEmbedder
from procmem.errors import (
    CorruptHeader,
    ExtractionFailed,
    OffsetOutOfBounds,
    PairingError,
    UnsupportedDtype,
)
from procmem.extract import (
    BASE_ONLY,
    CORRECTION_NOTICE,
    ExtractionRequest,
    ExtractorConfig,
    Observation,
    extract_state,
)
from procmem.fuse import ParameterHost, fuse_delta, fuse_factor
from procmem.match import (
    FusionPlan,
    MatchResult,
    rank_results,
    select_top_k,
    state_similarity,
    task_relevance,
    weight_profile,
)
from procmem.mocks import DelayedEmbedder, ScriptedVLMTransport, state_replay_transport
from procmem.runtime import Session, SessionConfig, summarize_latency
from procmem.schema import HistoryEntry, MATCHED_FIELDS, StateSequence, state_to_dict
from procmem.toybench import BenchConfig, build_bank, evaluate, generate_suite, run_bench

from conftest import make_state, random_adapter_set


def report(criterion: str, detail: str, started: float):
    print(f"[PASS] {criterion}: {detail} ({time.perf_counter() - started:.2f}s)")


# -- A1: weight table fidelity ------------------------------------------------

def test_a1_weight_table_fidelity():
    started = time.perf_counter()
    expected = {
        "pick": {"action": 0.35, "entity_shape": 0.35, "ee_orientation": 0.15, "target_point": 0.15},
        "place": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.15, "target_point": 0.35},
        "push": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.35, "target_point": 0.15},
        "press": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.15, "target_point": 0.15},
        "drag": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.15, "target_point": 0.15},
    }
    for action, weights in expected.items():
        assert weight_profile(action).by_field() == weights, action
    report("A1", "weight profiles match the table for all five actions", started)


# -- A2: matching arithmetic ---------------------------------------------------

def test_a2_matching_arithmetic():
    started = time.perf_counter()
    onehot = OneHotEmbedder()

    full_pick = make_state(action="pick")
    sim, _ = state_similarity(full_pick, full_pick, onehot)
    assert abs(sim - 1.00) <= 1e-12

    full_press = make_state(action="press")
    sim, _ = state_similarity(full_press, full_press, onehot)
    assert abs(sim - 0.80) <= 1e-12

    query = make_state(action="pick", entity_shape="cuboid", ee_orientation="vertical", target_point="top")
    candidate = make_state(action="pick", entity_shape="handle", ee_orientation="horizontal", target_point="rim")
    sim, _ = state_similarity(query, candidate, onehot)
    assert abs(sim - 0.35) <= 1e-12
    report("A2", "one-hot Sim = 1.00 / 0.80 / 0.35 within 1e-12", started)


# -- A3: softmax / top-k --------------------------------------------------------

def test_a3_softmax_top_k():
    started = time.perf_counter()
    # hand arithmetic: exp(0.8)=2.2255409285, exp(0.6)=1.8221188004
    results = [
        MatchResult("A", 0.8, 0, {}),
        MatchResult("B", 0.6, 0, {}),
    ]
    plan = select_top_k(results, k=2, temperature=1.0)
    assert abs(plan.weights[0] - 0.549834) <= 1e-6
    assert abs(plan.weights[1] - 0.450166) <= 1e-6

    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        sims = [float(s) for s in rng.uniform(-3, 3, size=n)]
        k = int(rng.integers(1, 12))
        temperature = float(rng.uniform(0.05, 8.0))
        cases = [MatchResult(f"t{i:02d}", s, 0, {}) for i, s in enumerate(sims)]
        got = select_top_k(cases, k=k, temperature=temperature)
        assert abs(sum(got.weights) - 1.0) <= 1e-9
    report("A3", "softmax hand value within 1e-6; 1000 random cases sum to 1 within 1e-9", started)


# -- A4: self-retrieval & MRR ---------------------------------------------------

WEIGHT_TABLE = {
    "pick": {"action": 0.35, "entity_shape": 0.35, "ee_orientation": 0.15, "target_point": 0.15},
    "place": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.15, "target_point": 0.35},
    "push": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.35, "target_point": 0.15},
    "press": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.15, "target_point": 0.15},
    "drag": {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.15, "target_point": 0.15},
}


def brute_force_ranking(query, memories):
    """Oracle: direct enumeration, no embeddings, no engine code."""
    sims = {}
    for task_id, states in memories.items():
        best = -1.0
        for state in states:
            total = 0.0
            for fname in MATCHED_FIELDS:
                if getattr(query, fname) == getattr(state, fname):
                    total += WEIGHT_TABLE[query.action][fname]
            best = max(best, total)
        sims[task_id] = best
    return sorted(sims, key=lambda t: (-sims[t], t))


@pytest.fixture(scope="module")
def default_suite(tmp_path_factory):
    cfg = BenchConfig()
    w0, tasks = generate_suite(cfg)
    bank = build_bank(w0, tasks, cfg, tmp_path_factory.mktemp("accept-bank") / "bank")
    return cfg, w0, tasks, bank


def test_a4_self_retrieval_and_mrr(default_suite):
    started = time.perf_counter()
    cfg, w0, tasks, bank = default_suite
    seen = {t.task_id: t.states.states for t in tasks if t.split == "seen"}
    unseen = [t for t in tasks if t.split == "unseen"]
    assert len(seen) == 8 and len(unseen) == 9

    embedder = OneHotEmbedder()
    reciprocal_sum = 0
    queries = 0
    for task in unseen:
        for query in task.states.states:
            oracle = brute_force_ranking(query, seen)
            engine = [
                r.task_id
                for r in rank_results(
                    task_relevance(query, StateSequence(tid, states), embedder)
                    for tid, states in seen.items()
                )
            ]
            assert engine == oracle
            assert engine[0] == task.gold_source
            reciprocal_sum += 1.0 / (engine.index(task.gold_source) + 1)
            queries += 1
    oracle_mrr = reciprocal_sum / queries
    assert oracle_mrr == 1.0

    engine_report = evaluate(w0, tasks, bank, cfg)
    assert engine_report.mrr == 1.0
    report("A4", f"gold at rank 1 for all {queries} queries; suite MRR = 1.0", started)


# -- A5: fusion identities -------------------------------------------------------

def test_a5_fusion_identities():
    started = time.perf_counter()
    rng = np.random.default_rng(4242)

    # k=1 behavioral equivalence over 100 random probes
    worst = 0.0
    for _ in range(100):
        adapter = random_adapter_set(
            rng, adapter_id="a", n_layers=1, rank=int(rng.integers(1, 5)),
            d_in=6, d_out=5, scaling_alpha=float(rng.uniform(0.5, 16)),
        )
        plan_f = FusionPlan(("a",), (1.0,), "factor", 1.0)
        plan_d = FusionPlan(("a",), (1.0,), "delta", 1.0)
        base = rng.standard_normal((5, 6))
        host_f = ParameterHost({"layer0": base.copy()})
        host_d = ParameterHost({"layer0": base.copy()})
        host_f.apply(fuse_factor(plan_f, [adapter]))
        host_d.apply(fuse_delta(plan_d, [adapter]))
        x = rng.standard_normal((6,))
        diff = np.abs(host_f.params["layer0"] @ x - host_d.params["layer0"] @ x).max()
        worst = max(worst, float(diff))
    assert worst <= 1e-6

    # apply-revert bitwise identity over 100 random fused adapters
    for _ in range(100):
        n = int(rng.integers(1, 4))
        sets = [random_adapter_set(rng, adapter_id=f"s{i}") for i in range(n)]
        raw = rng.dirichlet(np.ones(n))
        weights = tuple(float(w) for w in raw / raw.sum())
        mode = "factor" if rng.integers(2) == 0 else "delta"
        plan = FusionPlan(tuple(f"s{i}" for i in range(n)), weights, mode, 1.0)
        fused = fuse_factor(plan, sets) if mode == "factor" else fuse_delta(plan, sets)
        host = ParameterHost(
            {
                "layer0": rng.standard_normal((5, 6)).astype(np.float32),
                "layer1": rng.standard_normal((5, 6)).astype(np.float32),
            }
        )
        before = {k: v.copy() for k, v in host.params.items()}
        host.apply(fused)
        host.revert()
        for key in before:
            assert np.array_equal(host.params[key], before[key])

    # the 1x1 divergence witness, exact
    s1 = AdapterSet("a", 1, 1.0, {"L.down": np.array([[1.0]], dtype=np.float32),
                                  "L.up": np.array([[2.0]], dtype=np.float32)})
    s2 = AdapterSet("b", 1, 1.0, {"L.down": np.array([[3.0]], dtype=np.float32),
                                  "L.up": np.array([[0.0]], dtype=np.float32)})
    plan2 = FusionPlan(("a", "b"), (0.5, 0.5), "factor", 1.0)
    factor_delta = fuse_factor(plan2, [s1, s2]).layer_deltas()["L"][0, 0]
    delta_delta = fuse_delta(plan2, [s1, s2]).deltas["L"][0, 0]
    assert factor_delta == 2.0
    assert delta_delta == 1.0
    report(
        "A5",
        f"k=1 equivalence (max diff {worst:.2e} <= 1e-6); 100 bitwise restores; "
        "1x1 witness factor=2 vs delta=1",
        started,
    )


# -- A6: oracle transfer ----------------------------------------------------------

def test_a6_oracle_transfer(default_suite):
    started = time.perf_counter()
    cfg, w0, tasks, bank = default_suite
    bench = evaluate(w0, tasks, bank, cfg)
    k1 = [row for row in bench.rows if row.k == 1]
    assert len(k1) == 9 * 2  # every unseen task, both modes
    for row in k1:
        assert row.fused_error <= 1e-5, (row.task_id, row.mode, row.fused_error)
        assert row.fused_error < row.base_error
    worst = max(row.fused_error for row in k1)
    report("A6", f"k=1 fused error <= 1e-5 (worst {worst:.2e}) and < base for all 18 cells", started)


# -- A7: top-k sweep structure ------------------------------------------------------

def test_a7_topk_sweep_structure(tmp_path):
    started = time.perf_counter()
    cfg = BenchConfig()  # default: k in {1,2,3}, both modes
    assert cfg.k_values == (1, 2, 3)
    assert cfg.modes == ("factor", "delta")
    bench_report, curve = run_bench(cfg, tmp_path / "sweep")

    unseen_ids = {row.task_id for row in bench_report.rows}
    assert len(unseen_ids) == 9
    cells = {(r.task_id, r.k, r.mode) for r in bench_report.rows}
    for task_id in unseen_ids:
        for k in (1, 2, 3):
            for mode in ("factor", "delta"):
                assert (task_id, k, mode) in cells
    assert len(bench_report.rows) == 9 * 3 * 2

    csv_lines = (tmp_path / "sweep" / "similarity_gain.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 1 + len(bench_report.rows)
    assert curve.spearman is not None
    assert curve.spearman >= 0.0
    report(
        "A7",
        f"complete 9x3x2 grid; similarity-gain spearman {curve.spearman:+.4f} >= 0",
        started,
    )


# -- A8: codec --------------------------------------------------------------------

def _container_blob(entries: dict, metadata: dict, buffer: bytes) -> bytes:
    header = json.dumps({"__metadata__": metadata, **entries}, sort_keys=True).encode()
    return struct.pack("<Q", len(header)) + header + buffer


def test_a8_codec_properties(tmp_path):
    started = time.perf_counter()
    rng = np.random.default_rng(88)
    for _ in range(1000):
        adapter = random_adapter_set(
            rng,
            adapter_id=f"id-{rng.integers(1_000_000)}",
            n_layers=int(rng.integers(1, 4)),
            rank=int(rng.integers(1, 6)),
            d_in=int(rng.integers(1, 9)),
            d_out=int(rng.integers(1, 9)),
            scaling_alpha=float(rng.uniform(0.25, 128.0)),
        )
        blob = adapter_to_bytes(adapter)
        loaded = adapter_from_bytes(blob)
        assert adapter_to_bytes(loaded) == blob
        assert loaded.adapter_id == adapter.adapter_id
        assert loaded.rank == adapter.rank
        assert loaded.scaling_alpha == adapter.scaling_alpha
        for name in adapter.tensors:
            assert np.array_equal(loaded.tensors[name], adapter.tensors[name])

    meta = {"adapter_id": "t", "rank": "1", "scaling_alpha": "1.0"}
    down = {"dtype": "F32", "shape": [1, 2], "data_offsets": [0, 8]}
    up = {"dtype": "F32", "shape": [2, 1], "data_offsets": [8, 16]}
    payload = np.arange(4, dtype="<f4").tobytes()

    def entries(**overrides):
        d = {"L.down": dict(down), "L.up": dict(up)}
        for name, patch in overrides.items():
            if patch is None:
                d.pop(name)
            else:
                d[name] = patch
        return d

    corrupted = [
        # CorruptHeader
        (struct.pack("<Q", 5) + b"junk!", CorruptHeader),
        (struct.pack("<Q", 10_000) + b"{}", CorruptHeader),
        (_container_blob(entries(), {}, payload), CorruptHeader),
        (_container_blob(entries(), {"adapter_id": "t"}, payload), CorruptHeader),
        (_container_blob(entries(), {**meta, "rank": "many"}, payload), CorruptHeader),
        # OffsetOutOfBounds
        (_container_blob(entries(), meta, payload[:12]), OffsetOutOfBounds),
        (
            _container_blob(
                entries(**{"L.up": {"dtype": "F32", "shape": [2, 1], "data_offsets": [4, 12]}}),
                meta,
                payload,
            ),
            OffsetOutOfBounds,
        ),
        (
            _container_blob(
                entries(**{"L.down": {"dtype": "F32", "shape": [1, 3], "data_offsets": [0, 8]}}),
                meta,
                payload,
            ),
            OffsetOutOfBounds,
        ),
        (
            _container_blob(
                entries(**{"L.down": {"dtype": "F32", "shape": [1, 2], "data_offsets": [-8, 0]}}),
                meta,
                payload,
            ),
            OffsetOutOfBounds,
        ),
        (
            _container_blob(
                entries(**{"L.down": {"dtype": "F32", "shape": [1, 2], "data_offsets": [8, 0]}}),
                meta,
                payload,
            ),
            OffsetOutOfBounds,
        ),
        # PairingError
        (_container_blob({"L.down": dict(down)}, meta, payload[:8]), PairingError),
        (_container_blob({"L.up": {"dtype": "F32", "shape": [2, 1], "data_offsets": [0, 8]}}, meta, payload[:8]), PairingError),
        (
            _container_blob(
                {
                    "L.down": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]},
                    "L.up": {"dtype": "F32", "shape": [2, 1], "data_offsets": [16, 24]},
                },
                {**meta, "rank": "2"},
                np.arange(6, dtype="<f4").tobytes(),
            ),
            PairingError,
        ),
        (
            _container_blob(
                {"L.weight": {"dtype": "F32", "shape": [1, 2], "data_offsets": [0, 8]},
                 "L.up": {"dtype": "F32", "shape": [2, 1], "data_offsets": [8, 16]}},
                meta,
                payload,
            ),
            PairingError,
        ),
        (_container_blob(entries(), {**meta, "rank": "4"}, payload), PairingError),
        # UnsupportedDtype
        (
            _container_blob(
                entries(**{"L.down": {"dtype": "F64", "shape": [1, 2], "data_offsets": [0, 8]}}),
                meta,
                payload,
            ),
            UnsupportedDtype,
        ),
        (
            _container_blob(
                entries(**{"L.down": {"dtype": "F16", "shape": [1, 2], "data_offsets": [0, 8]}}),
                meta,
                payload,
            ),
            UnsupportedDtype,
        ),
        (
            _container_blob(
                entries(**{"L.down": {"dtype": "BF16", "shape": [1, 2], "data_offsets": [0, 8]}}),
                meta,
                payload,
            ),
            UnsupportedDtype,
        ),
        (
            _container_blob(
                entries(**{"L.down": {"dtype": "I8", "shape": [1, 2], "data_offsets": [0, 8]}}),
                meta,
                payload,
            ),
            UnsupportedDtype,
        ),
        (
            _container_blob(
                entries(**{"L.down": {"shape": [1, 2], "data_offsets": [0, 8]}}),
                meta,
                payload,
            ),
            UnsupportedDtype,
        ),
    ]
    assert len(corrupted) == 20
    for index, (blob, expected_error) in enumerate(corrupted):
        path = tmp_path / f"corrupt-{index}.lora"
        path.write_bytes(blob)
        with pytest.raises(expected_error):
            read_adapter(path)
    report("A8", "1000 bitwise round-trips; 20 corrupted files raise designated errors", started)


# -- A9: extraction robustness ------------------------------------------------------

def test_a9_extraction_robustness():
    started = time.perf_counter()
    valid = json.dumps(state_to_dict(make_state()))
    req = ExtractionRequest(
        observation=Observation(ref="now"), instruction="pick it up", history=()
    )

    transport = ScriptedVLMTransport([valid])
    state = extract_state(req, ExtractorConfig(max_retries=0, fallback_policy="fail"), transport)
    assert state == make_state()
    assert transport.calls == 1

    fenced = f"Sure:\n```json\n{valid}\n```"
    state = extract_state(
        req, ExtractorConfig(max_retries=0, fallback_policy="fail"),
        ScriptedVLMTransport([fenced]),
    )
    assert state == make_state()

    invalid = json.dumps({**state_to_dict(make_state()), "action": "grasp"})
    transport = ScriptedVLMTransport([invalid, valid])
    state = extract_state(req, ExtractorConfig(max_retries=1, fallback_policy="fail"), transport)
    assert state == make_state()
    assert transport.calls == 2
    assert transport.requests[1]["messages"][1]["content"][-1]["text"] == CORRECTION_NOTICE

    previous = make_state(action="drag")
    history = (HistoryEntry(0, "obs-0", previous),)
    req_h = ExtractionRequest(observation=Observation(ref="now"), instruction="x", history=history)
    state = extract_state(
        req_h, ExtractorConfig(max_retries=1, fallback_policy="previous_state"),
        ScriptedVLMTransport(["nope", "still nope"]),
    )
    assert state == previous

    state = extract_state(
        req, ExtractorConfig(max_retries=1, fallback_policy="base_only"),
        ScriptedVLMTransport(["nope", "still nope"]),
    )
    assert state is BASE_ONLY

    with pytest.raises(ExtractionFailed):
        extract_state(
            req, ExtractorConfig(max_retries=1, fallback_policy="fail"),
            ScriptedVLMTransport(["nope", "still nope"]),
        )
    report("A9", "valid/fenced/retry/fallback traces all match the contracts", started)


# -- A10: runtime cleanliness, reuse, latency -----------------------------------------

def _episode_setup(tmp_path, name, extract_delay_s=0.0, embed_delay_s=0.0):
    rng = np.random.default_rng(1010)
    bank_dir = tmp_path / f"bank-{name}"
    bank = Bank.init(bank_dir, "onehot-fixture-v1")
    mem_states = {
        "mem_a": make_state(action="pick", entity_shape="spherical", ee_orientation="vertical", target_point="top"),
        "mem_b": make_state(action="press", entity_shape="handle", ee_orientation="vertical", target_point="center"),
    }
    for task_id, state in mem_states.items():
        path = tmp_path / f"{name}-{task_id}.lora"
        write_adapter(random_adapter_set(rng, adapter_id=task_id), path)
        bank.register_memory(task_id, StateSequence(task_id, (state,)), path)

    # queries differ from the stored states in one low-weight field, so the
    # first chunk of each stage embeds fresh query texts
    stage_one = mem_states["mem_a"].with_field("ee_orientation", "horizontal")
    stage_two = mem_states["mem_b"].with_field("target_point", "top")
    script = [stage_one] * 3 + [stage_two] * 7

    embedder = CachedEmbedder(
        DelayedEmbedder(OneHotEmbedder(), embed_delay_s),
        EmbedCache(tmp_path / f"cache-{name}"),
    )
    host = ParameterHost(
        {
            "layer0": rng.standard_normal((5, 6)).astype(np.float32),
            "layer1": rng.standard_normal((5, 6)).astype(np.float32),
        }
    )
    session = Session(
        bank=bank,
        embedder=embedder,
        extractor_cfg=ExtractorConfig(max_retries=0, fallback_policy="fail"),
        host=host,
        act=lambda obs, instr: f"chunk@{obs.ref}",
        config=SessionConfig(k=1),
        transport=state_replay_transport(script, delay_s=extract_delay_s),
    )
    return session, host, embedder


def _run_ten_chunks(session, host):
    base = {k: v.copy() for k, v in host.params.items()}
    traces = []
    for i in range(10):
        _, trace = session.run_chunk(Observation(ref=f"o{i}"), "do the task")
        traces.append(trace)
        assert host.staged is None
        for key in base:
            assert np.array_equal(host.params[key], base[key])
    return traces


def test_a10_runtime_cleanliness_reuse_latency(tmp_path):
    started = time.perf_counter()

    # structure + determinism, no delays
    session1, host1, _ = _episode_setup(tmp_path, "fast1")
    traces1 = _run_ten_chunks(session1, host1)
    session2, host2, _ = _episode_setup(tmp_path, "fast2")
    traces2 = _run_ten_chunks(session2, host2)

    expected_reuse = [False, True, True, False] + [True] * 6
    assert [t.reused for t in traces1] == expected_reuse
    assert [t.reused for t in traces2] == expected_reuse
    for a, b in zip(traces1, traces2):
        assert a.plan.selected == b.plan.selected
        assert a.plan.weights == b.plan.weights
    assert traces1[0].plan.selected == ("mem_a",)
    assert traces1[3].plan.selected == ("mem_b",)

    # latency accounting with the configured mock delays
    session3, host3, embedder3 = _episode_setup(
        tmp_path, "timed", extract_delay_s=2.591, embed_delay_s=0.235
    )
    traces3 = _run_ten_chunks(session3, host3)
    assert [t.reused for t in traces3] == expected_reuse
    latency = summarize_latency(traces3, embedder=embedder3)

    extract_mean = next(r.mean_ms for r in latency.phases if r.phase == "extract")
    assert abs(extract_mean - 2591.0) <= 259.1, extract_mean
    assert latency.embed_api_mean_ms is not None
    assert abs(latency.embed_api_mean_ms - 235.0) <= 23.5, latency.embed_api_mean_ms
    assert latency.reused_chunks == 8
    report(
        "A10",
        f"host clean x10; reuse pattern ok; plans identical across runs; "
        f"extract mean {extract_mean:.0f}ms, embed call mean {latency.embed_api_mean_ms:.0f}ms",
        started,
    )
