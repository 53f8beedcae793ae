"""Command-line operator surface.

Exit codes: 0 success, 1 usage error, 2 operational error (the message
names the violated contract).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bank import Bank
from .embed import CachedEmbedder, EmbedCache, make_embedder
from .errors import ProcmemError
from .fuse import fuse, write_fused
from .match import FusionPlan
from .schema import validate_state
from .service import build_retrieval_payload, load_service_config, serve
from .toybench import BenchConfig, load_bench_config, run_bench

USAGE_ERROR = 1
OPERATIONAL_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_ERROR)


def _build_parser() -> _Parser:
    parser = _Parser(prog="procmem", description="procedural-memory engine")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    bank = sub.add_parser("bank", help="bank lifecycle")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True, parser_class=_Parser)

    p = bank_sub.add_parser("init", help="create an empty bank")
    p.add_argument("bank_dir")
    p.add_argument("--embed-model", default="onehot-fixture-v1",
                   help="embedding model id recorded in the manifest")

    p = bank_sub.add_parser("add", help="register one memory")
    p.add_argument("bank_dir")
    p.add_argument("--task-id", required=True)
    p.add_argument("--states", required=True, help="JSON file: list of state objects")
    p.add_argument("--adapter", required=True, help="adapter container file")

    p = bank_sub.add_parser("list", help="list registered memories")
    p.add_argument("bank_dir")
    p.add_argument("--json", action="store_true")

    p = bank_sub.add_parser("validate", help="check manifest and adapters")
    p.add_argument("bank_dir")
    p.add_argument("--json", action="store_true")

    p = bank_sub.add_parser("precompute", help="pre-encode all state field texts")
    p.add_argument("bank_dir")
    p.add_argument("--embedder", default="onehot",
                   help="onehot | hashed:<seed>:<dims> | <endpoint url>")
    p.add_argument("--model", default="", help="model id for a remote endpoint")
    p.add_argument("--cache-dir", default="", help="embedding cache directory")

    p = sub.add_parser("retrieve", help="rank memories for a query state")
    p.add_argument("--bank", required=True)
    p.add_argument("--state", required=True, help="query state as a JSON object string")
    p.add_argument("-k", type=int, default=1)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--embedder", default="onehot")
    p.add_argument("--model", default="")
    p.add_argument("--cache-dir", default="")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("fuse", help="fuse registered adapters per a plan file")
    p.add_argument("--bank", required=True)
    p.add_argument("--plan", required=True,
                   help="JSON file: {selected: [...], weights: [...], mode?}")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["factor", "delta"], default=None)

    bench = sub.add_parser("bench", help="synthetic verification bench")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True, parser_class=_Parser)
    p = bench_sub.add_parser("run", help="generate, evaluate and write reports")
    p.add_argument("--config", default=None, help="JSON bench config file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--listen", default=None)
    p.add_argument("--bank", default=None)

    return parser


def _make_cli_embedder(spec: str, model: str, cache_dir: str):
    backend = make_embedder(spec, model)
    if cache_dir:
        return CachedEmbedder(backend, EmbedCache(cache_dir))
    return backend


def _cmd_bank(args) -> int:
    if args.bank_command == "init":
        Bank.init(args.bank_dir, embed_model_id=args.embed_model)
        print(f"initialized bank at {args.bank_dir}")
        return 0
    if args.bank_command == "add":
        bank = Bank.load(args.bank_dir)
        with open(args.states, "r", encoding="utf-8") as fh:
            raw_states = json.load(fh)
        from .schema import StateSequence

        states = StateSequence(args.task_id, tuple(validate_state(s) for s in raw_states))
        bank.register_memory(args.task_id, states, args.adapter)
        print(f"registered {args.task_id} ({len(states)} states)")
        return 0
    if args.bank_command == "list":
        bank = Bank.load(args.bank_dir)
        rows = [
            {
                "task_id": e.task_id,
                "n_states": len(e.states),
                "adapter_ref": e.adapter_ref,
            }
            for e in bank.manifest.memories
        ]
        if args.json:
            print(json.dumps({"memories": rows, "count": len(rows)}, sort_keys=True))
        else:
            for row in rows:
                print(f"{row['task_id']}\t{row['n_states']} states\t{row['adapter_ref']}")
            print(f"{len(rows)} memories")
        return 0
    if args.bank_command == "validate":
        bank = Bank.load(args.bank_dir)
        report = bank.validate()
        if args.json:
            print(
                json.dumps(
                    {
                        "errors": report.errors,
                        "warnings": report.warnings,
                        "factor_fusable": report.factor_fusable,
                        "memory_count": report.memory_count,
                    },
                    sort_keys=True,
                )
            )
        else:
            print(report.render())
        return 0 if report.ok else OPERATIONAL_ERROR
    if args.bank_command == "precompute":
        bank = Bank.load(args.bank_dir)
        cache_dir = args.cache_dir or str(Path(args.bank_dir) / "embed_cache")
        embedder = _make_cli_embedder(args.embedder, args.model, cache_dir)
        count = bank.precompute_embeddings(embedder)
        print(f"embedded {count} new texts")
        return 0
    raise AssertionError(args.bank_command)


def _cmd_retrieve(args) -> int:
    bank = Bank.load(args.bank)
    state = validate_state(json.loads(args.state))
    embedder = _make_cli_embedder(args.embedder, args.model, args.cache_dir)
    payload = build_retrieval_payload(bank, embedder, state, args.k, args.temp)
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for match in payload["matches"]:
            print(
                f"{match['task_id']}\tsimilarity={match['similarity']:.4f}"
                f"\tbest_state={match['best_state_index']}"
            )
        plan = payload["plan"]
        pairs = ", ".join(
            f"{tid}:{w:.6f}" for tid, w in zip(plan["selected"], plan["weights"])
        )
        print(f"plan: {pairs}")
    return 0


def _cmd_fuse(args) -> int:
    bank = Bank.load(args.bank)
    with open(args.plan, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    mode = args.mode or raw.get("mode", "factor")
    plan = FusionPlan(
        selected=tuple(raw["selected"]),
        weights=tuple(float(w) for w in raw["weights"]),
        mode=mode,
        temperature=float(raw.get("temperature", 1.0)),
    )
    sets = [bank.adapter_set(task_id) for task_id in plan.selected]
    fused = fuse(plan, sets)
    write_fused(fused, args.out)
    print(f"wrote {fused.mode} fused adapter to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    cfg = load_bench_config(args.config) if args.config else BenchConfig()
    report, curve = run_bench(cfg, args.out)
    spearman = "n/a" if curve.spearman is None else f"{curve.spearman:.4f}"
    print(
        f"bench complete: {len(report.rows)} rows, MRR={report.mrr:.4f}, "
        f"similarity-gain spearman={spearman}"
    )
    print(f"reports under {args.out}")
    return 0


def _cmd_serve(args) -> int:
    cfg = load_service_config(args.config)
    if args.listen:
        cfg.listen = args.listen
    if args.bank:
        cfg.bank = args.bank
    if not cfg.bank:
        print("error: no bank configured (flag, config file, or PROCMEM_BANK)", file=sys.stderr)
        return USAGE_ERROR
    serve(cfg)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bank":
            return _cmd_bank(args)
        if args.command == "retrieve":
            return _cmd_retrieve(args)
        if args.command == "fuse":
            return _cmd_fuse(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "serve":
            return _cmd_serve(args)
        raise AssertionError(args.command)
    except ProcmemError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return OPERATIONAL_ERROR
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return OPERATIONAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
