"""Deterministic in-process stand-ins for the remote services.

These back the offline test and bench configurations: a scripted
vision-language transport that replays canned replies, an embedder wrapper
that simulates per-call latency, and a scripted environment for episodes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .embed import Embedder, EmbeddingVector
from .errors import EndpointUnavailable
from .extract import Observation
from .schema import ProceduralState, serialize_state


class ScriptedVLMTransport:
    """Replays a fixed sequence of raw replies, recording each request."""

    def __init__(self, replies: Sequence[str], delay_s: float = 0.0):
        self.replies = list(replies)
        self.delay_s = delay_s
        self.requests: list[dict] = []
        self._cursor = 0

    def complete(self, payload: dict) -> str:
        self.requests.append(payload)
        if self._cursor >= len(self.replies):
            raise EndpointUnavailable("scripted transport exhausted its replies")
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        reply = self.replies[self._cursor]
        self._cursor += 1
        return reply

    @property
    def calls(self) -> int:
        return self._cursor


def state_replay_transport(
    states: Sequence[ProceduralState],
    delay_s: float = 0.0,
) -> ScriptedVLMTransport:
    """A transport whose n-th reply is the n-th state, serialized."""
    return ScriptedVLMTransport([serialize_state(s) for s in states], delay_s=delay_s)


class DelayedEmbedder:
    """Wraps an embedder with a fixed simulated per-call latency."""

    def __init__(self, inner: Embedder, delay_s: float):
        self.inner = inner
        self.delay_s = delay_s

    @property
    def model_id(self) -> str:
        return self.inner.model_id

    def embed(self, text: str) -> EmbeddingVector:
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        return self.inner.embed(text)


@dataclass
class ScriptedEnv:
    """Supplies observations and consumes action chunks for n steps."""

    n_steps: int
    ref_prefix: str = "obs"
    observations: Optional[Sequence[Observation]] = None
    submitted: list = field(default_factory=list)
    _step: int = 0

    def observe(self) -> Observation:
        if self.observations is not None:
            return self.observations[self._step]
        return Observation(ref=f"{self.ref_prefix}-{self._step}")

    def submit(self, action_chunk) -> bool:
        self.submitted.append(action_chunk)
        self._step += 1
        return self._step >= self.n_steps
