"""Client for the procmem service's /v1 HTTP API."""

from __future__ import annotations

import json
from typing import Mapping

import requests

from .errors import ClientValidationError, TransportError

# the service's closed state schema, mirrored here so bad payloads fail
# before any request goes out
STATE_KEYS = ("subtask", "action", "entity_shape", "ee_orientation", "target_point")
ENUMS = {
    "action": ("pick", "place", "press", "push", "drag"),
    "entity_shape": (
        "open_container",
        "cuboid",
        "spherical",
        "handle",
        "lying_cylindrical",
        "upright_cylindrical",
        "other",
    ),
    "ee_orientation": ("vertical", "horizontal"),
    "target_point": (
        "front",
        "back",
        "left",
        "right",
        "center",
        "midpoint",
        "end",
        "top",
        "rim",
    ),
}


def validate_state_payload(state: Mapping) -> dict:
    if not isinstance(state, Mapping):
        raise ClientValidationError("state must be a JSON object")
    for key in STATE_KEYS:
        if key not in state:
            raise ClientValidationError(f"state lacks key {key!r}")
    for key in state:
        if key not in STATE_KEYS:
            raise ClientValidationError(f"state carries unknown key {key!r}")
    out = {}
    for key, allowed in ENUMS.items():
        value = state[key]
        if not isinstance(value, str) or value.strip().lower() not in allowed:
            raise ClientValidationError(f"state field {key!r} has invalid value {value!r}")
        out[key] = value.strip().lower()
    out["subtask"] = state["subtask"]
    if not isinstance(out["subtask"], str):
        raise ClientValidationError("subtask must be a string")
    return {key: out[key] for key in STATE_KEYS}


def client_retrieve(
    base_url: str,
    state: Mapping,
    k: int = 1,
    temperature: float = 1.0,
    timeout: float = 10.0,
) -> dict:
    """POST /v1/retrieve and return the parsed body.

    The state is validated locally first; transport and non-200 replies
    raise TransportError naming the endpoint.
    """
    payload = {
        "state": validate_state_payload(state),
        "k": int(k),
        "temperature": float(temperature),
    }
    url = base_url.rstrip("/") + "/v1/retrieve"
    try:
        response = requests.post(url, json=payload, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"cannot reach {url}: {exc}") from exc
    if response.status_code != 200:
        raise TransportError(f"{url} replied {response.status_code}: {response.text}")
    try:
        return response.json()
    except json.JSONDecodeError as exc:
        raise TransportError(f"{url} replied with non-JSON body") from exc


def canonical_json(payload: dict) -> str:
    """Key-sorted JSON used for cross-implementation comparisons."""
    return json.dumps(payload, sort_keys=True)
