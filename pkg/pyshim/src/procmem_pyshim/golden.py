"""Golden interop vectors.

Emits a small fixed bank (two adapters plus manifest) together with the
retrieval response the service must produce for a pinned query. The engine
test suite consumes these files to prove byte-level container interop and
scoring equivalence without this package installed; regeneration is
byte-deterministic so the checked-in copies can be digest-pinned.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .container import write_tensor_file

# all values are dyadic rationals: exact in float32 and in JSON round-trips
GOLDEN_ADAPTERS = {
    "golden-alpha": {
        "blocks.0.attn.qkv.down": [[1.0, -0.5, 0.25, 2.0], [0.75, 1.5, -1.0, 0.125]],
        "blocks.0.attn.qkv.up": [[0.5, -0.25], [1.0, 0.75], [-1.5, 2.0]],
        "blocks.0.mlp.fc1.down": [[0.25, 0.5, -0.75, 1.25], [2.0, -0.125, 0.375, 1.0]],
        "blocks.0.mlp.fc1.up": [[1.0, 0.5], [-0.5, 0.25], [0.75, -1.0]],
    },
    "golden-bravo": {
        "blocks.0.attn.qkv.down": [[-1.0, 0.5, 1.5, 0.25], [0.5, -2.0, 1.0, 0.75]],
        "blocks.0.attn.qkv.up": [[0.25, 1.0], [-0.75, 0.5], [2.0, -0.125]],
        "blocks.0.mlp.fc1.down": [[0.5, -0.25, 1.0, -1.5], [0.125, 0.75, -0.5, 2.0]],
        "blocks.0.mlp.fc1.up": [[-1.0, 0.25], [0.5, 1.5], [-0.25, 0.75]],
    },
}
GOLDEN_RANK = 2
GOLDEN_ALPHA = 32.0

GOLDEN_STATES = {
    "golden-alpha": {
        "subtask": "pick the bell",
        "action": "pick",
        "entity_shape": "spherical",
        "ee_orientation": "vertical",
        "target_point": "top",
    },
    "golden-bravo": {
        "subtask": "place the block on the rim",
        "action": "place",
        "entity_shape": "cuboid",
        "ee_orientation": "horizontal",
        "target_point": "rim",
    },
}

GOLDEN_QUERY = {
    "subtask": "pick the round thing",
    "action": "pick",
    "entity_shape": "spherical",
    "ee_orientation": "horizontal",
    "target_point": "top",
}
GOLDEN_K = 2
GOLDEN_TEMPERATURE = 1.0

# action-conditioned field weights of the service's scoring contract
FIELD_ORDER = ("action", "entity_shape", "ee_orientation", "target_point")
DEFAULT_WEIGHTS = {"action": 0.35, "entity_shape": 0.15, "ee_orientation": 0.15, "target_point": 0.15}
EMPHASIS = {"pick": "entity_shape", "place": "target_point", "push": "ee_orientation"}


def _weights(action: str) -> dict[str, float]:
    weights = dict(DEFAULT_WEIGHTS)
    if action in EMPHASIS:
        weights[EMPHASIS[action]] = 0.35
    return weights


def _similarity(query: dict, state: dict) -> float:
    weights = _weights(query["action"])
    return sum(
        weights[f] * (1.0 if query[f] == state[f] else 0.0) for f in FIELD_ORDER
    )


def _softmax(sims: list[float], temperature: float) -> list[float]:
    scaled = [s / temperature for s in sims]
    peak = max(scaled)
    exps = [math.exp(s - peak) for s in scaled]
    total = sum(exps)
    return [max(e / total, 1e-300) for e in exps]


def expected_retrieval_payload() -> dict:
    matches = []
    for task_id, state in GOLDEN_STATES.items():
        matches.append(
            {
                "task_id": task_id,
                "similarity": _similarity(GOLDEN_QUERY, state),
                "best_state_index": 0,
            }
        )
    matches.sort(key=lambda m: (-m["similarity"], m["task_id"]))
    top = matches[: GOLDEN_K]
    weights = _softmax([m["similarity"] for m in top], GOLDEN_TEMPERATURE)
    return {
        "matches": matches,
        "plan": {"selected": [m["task_id"] for m in top], "weights": weights},
    }


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def emit_golden_vectors(out_dir) -> dict[str, str]:
    """Write the golden files; returns relpath -> sha256 of everything emitted."""
    out = Path(out_dir)
    bank_dir = out / "bank"
    adapters_dir = bank_dir / "adapters"
    adapters_dir.mkdir(parents=True, exist_ok=True)

    for adapter_id, tensors in GOLDEN_ADAPTERS.items():
        write_tensor_file(
            {name: np.asarray(values, dtype=np.float32) for name, values in tensors.items()},
            {
                "adapter_id": adapter_id,
                "rank": str(GOLDEN_RANK),
                "scaling_alpha": repr(GOLDEN_ALPHA),
            },
            adapters_dir / f"{adapter_id}.lora",
        )

    manifest = {
        "version": 1,
        "embed_model_id": "onehot-fixture-v1",
        "base_adapter_ref": None,
        "memories": [
            {
                "task_id": task_id,
                "states": [GOLDEN_STATES[task_id]],
                "adapter_ref": f"adapters/{task_id}.lora",
            }
            for task_id in sorted(GOLDEN_STATES)
        ],
    }
    _dump_json(bank_dir / "bank.json", manifest)

    _dump_json(
        out / "expected_adapter.json",
        {
            "adapter_id": "golden-alpha",
            "rank": GOLDEN_RANK,
            "scaling_alpha": GOLDEN_ALPHA,
            "tensors": {
                name: {
                    "shape": list(np.asarray(values).shape),
                    "values": values,
                }
                for name, values in GOLDEN_ADAPTERS["golden-alpha"].items()
            },
        },
    )

    _dump_json(
        out / "expected_retrieval.json",
        {
            "query_state": GOLDEN_QUERY,
            "k": GOLDEN_K,
            "temperature": GOLDEN_TEMPERATURE,
            "expected": expected_retrieval_payload(),
        },
    )

    digests = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "digests.json":
            digests[str(path.relative_to(out))] = hashlib.sha256(path.read_bytes()).hexdigest()
    _dump_json(out / "digests.json", {"sha256": digests})
    return digests
