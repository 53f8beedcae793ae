"""Console entry points: procmem-export and procmem-client."""

from __future__ import annotations

import argparse
import json
import sys

from .client import canonical_json, client_retrieve
from .errors import PyshimError
from .export import export_adapter, load_export_spec
from .golden import emit_golden_vectors


def export_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="procmem-export", description="export adapters into the bank container format"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("adapter", help="export one checkpoint per a mapping spec")
    p.add_argument("--spec", required=True, help="JSON export spec")
    p.add_argument("--out", required=True)

    p = sub.add_parser("golden", help="emit the golden interop vectors")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "adapter":
            spec = load_export_spec(args.spec)
            export_adapter(spec, args.out)
            print(f"exported {spec.adapter_id} to {args.out}")
        else:
            digests = emit_golden_vectors(args.out)
            print(f"emitted {len(digests)} golden files under {args.out}")
        return 0
    except (PyshimError, OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def client_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="procmem-client", description="talk to a procmem service"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("retrieve", help="POST /v1/retrieve")
    p.add_argument("--url", required=True, help="service base URL")
    p.add_argument("--state", required=True, help="query state as a JSON object string")
    p.add_argument("-k", type=int, default=1)
    p.add_argument("--temp", type=float, default=1.0)

    args = parser.parse_args(argv)
    try:
        state = json.loads(args.state)
        plan = client_retrieve(args.url, state, k=args.k, temperature=args.temp)
        print(canonical_json(plan))
        return 0
    except (PyshimError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(export_main())
