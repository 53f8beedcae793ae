from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from procmem.container import AdapterSet
from procmem.schema import (
    ACTIONS,
    EE_ORIENTATIONS,
    ENTITY_SHAPES,
    TARGET_POINTS,
    ProceduralState,
)


def make_state(
    action="pick",
    entity_shape="spherical",
    ee_orientation="vertical",
    target_point="top",
    subtask=None,
) -> ProceduralState:
    return ProceduralState(
        subtask=subtask if subtask is not None else f"{action} the {entity_shape}",
        action=action,
        entity_shape=entity_shape,
        ee_orientation=ee_orientation,
        target_point=target_point,
    )


def random_state(rng: np.random.Generator) -> ProceduralState:
    return make_state(
        action=ACTIONS[rng.integers(len(ACTIONS))],
        entity_shape=ENTITY_SHAPES[rng.integers(len(ENTITY_SHAPES))],
        ee_orientation=EE_ORIENTATIONS[rng.integers(len(EE_ORIENTATIONS))],
        target_point=TARGET_POINTS[rng.integers(len(TARGET_POINTS))],
    )


def random_adapter_set(
    rng: np.random.Generator,
    adapter_id="adapter",
    n_layers=2,
    rank=4,
    d_in=6,
    d_out=5,
    scaling_alpha=None,
) -> AdapterSet:
    tensors = {}
    for i in range(n_layers):
        tensors[f"layer{i}.down"] = rng.standard_normal((rank, d_in)).astype(np.float32)
        tensors[f"layer{i}.up"] = rng.standard_normal((d_out, rank)).astype(np.float32)
    return AdapterSet(
        adapter_id=adapter_id,
        rank=rank,
        scaling_alpha=float(scaling_alpha if scaling_alpha is not None else rank),
        tensors=tensors,
    )


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        status, reply = self.server.app_handler(self.path, body)  # type: ignore[attr-defined]
        payload = json.dumps(reply).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


class LocalEndpoint:
    """Tiny local HTTP endpoint driven by a (path, body) -> (status, reply) handler."""

    def __init__(self, handler):
        self.server = HTTPServer(("127.0.0.1", 0), _Handler)
        self.server.app_handler = handler  # type: ignore[attr-defined]
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def local_endpoint():
    endpoints = []

    def factory(handler) -> LocalEndpoint:
        ep = LocalEndpoint(handler)
        endpoints.append(ep)
        return ep

    yield factory
    for ep in endpoints:
        ep.close()
