"""Procedural-state extraction via a vision-language endpoint.

Builds the structured-output prompt, sends it with the current image,
instruction and deduped interaction history, and validates the reply as a
single strict JSON state. Non-compliant replies are retried with a short
correction notice; exhaustion falls back per policy so no partial state
ever escapes.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

import requests

from .errors import (
    EndpointUnavailable,
    ExtractionFailed,
    NonMonotonicStep,
    SchemaError,
)
from .schema import (
    ENUM_VALUES,
    HistoryEntry,
    ProceduralState,
    dedup_history,
    serialize_state,
    validate_state,
)


class BaseOnly:
    """Sentinel telling the runtime to skip adaptation for this chunk."""

    def __repr__(self):
        return "BASE_ONLY"


BASE_ONLY = BaseOnly()

StateOrSentinel = Union[ProceduralState, BaseOnly]

FALLBACK_POLICIES = ("previous_state", "base_only", "fail")

_SYSTEM_PROMPT_TEMPLATE = """Role: Embodied AI subtask target-point predictor with vision-language input.

Task: Given one image and one instruction, output ONE JSON describing the CURRENT subtask target point only. Do not output any extra text.

Output must be a single strictly valid JSON object with exactly this schema:
{{
  "subtask": "sentence",
  "action": "word",
  "entity_shape": "word",
  "ee_orientation": "word",
  "target_point": "word"
}}

Allowed Definitions:
- subtask: A concise verb-noun phrase describing the current subtask.

Allowed Enum Values:
- action: [{actions}]

- entity_shape: [{entity_shapes}]

- ee_orientation: [{ee_orientations}]

- target_point: [{target_points}]

Hard constraints:
1) Output JSON only. No markdown, no comments, no trailing commas.
2) Do not add/remove keys. Keep exactly the keys shown above.
3) Use ONLY one of the allowed enum values."""

CORRECTION_NOTICE = (
    "Correction: the previous reply was not one strictly valid JSON object with "
    "exactly the schema keys and allowed enum values. Output the JSON object only."
)


def system_prompt() -> str:
    """The extraction system prompt with the enum vocabularies filled in."""
    return _SYSTEM_PROMPT_TEMPLATE.format(
        actions=", ".join(ENUM_VALUES["action"]),
        entity_shapes=", ".join(ENUM_VALUES["entity_shape"]),
        ee_orientations=", ".join(ENUM_VALUES["ee_orientation"]),
        target_points=", ".join(ENUM_VALUES["target_point"]),
    )


@dataclass(frozen=True)
class Observation:
    """One visual observation: raw image bytes plus an opaque reference."""

    image_bytes: bytes = b""
    media_type: str = "image/png"
    ref: str = ""


@dataclass(frozen=True)
class ExtractionRequest:
    observation: Observation
    instruction: str
    history: tuple[HistoryEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        if not self.instruction:
            raise ValueError("instruction must be non-empty")


@dataclass(frozen=True)
class ExtractorConfig:
    endpoint: str = ""
    model_id: str = ""
    max_retries: int = 1
    timeout: float = 30.0
    fallback_policy: str = "previous_state"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.fallback_policy not in FALLBACK_POLICIES:
            raise ValueError(f"unknown fallback policy: {self.fallback_policy!r}")


def _image_part(observation: Observation) -> dict:
    return {
        "type": "image",
        "media_type": observation.media_type,
        "data": base64.b64encode(observation.image_bytes).decode("ascii"),
    }


def build_prompt(req: ExtractionRequest) -> tuple[str, list[dict]]:
    """Deterministic (system_text, user_parts) for one extraction call.

    User parts carry the history as (image, compact state JSON) pairs in
    step order, then the current image, then the instruction.
    """
    parts: list[dict] = []
    for entry in req.history:
        # history images travel by reference; the endpoint resolves the handle
        parts.append({"type": "image", "ref": entry.observation_ref})
        parts.append({"type": "text", "text": serialize_state(entry.state)})
    parts.append(_image_part(req.observation))
    parts.append({"type": "text", "text": req.instruction})
    return system_prompt(), parts


class VLMTransport(Protocol):
    def complete(self, payload: dict) -> str: ...


class HttpVLMTransport:
    """HTTP chat-completions style transport.

    ``POST {model, messages: [...]}`` returning
    ``{choices: [{message: {content: str}}]}``.
    """

    def __init__(self, cfg: ExtractorConfig, session: Optional[requests.Session] = None):
        if not cfg.endpoint:
            raise ValueError("extractor endpoint is not configured")
        self.cfg = cfg
        self._session = session or requests.Session()

    def complete(self, payload: dict) -> str:
        try:
            response = self._session.post(
                self.cfg.endpoint, json=payload, timeout=self.cfg.timeout
            )
        except requests.RequestException as exc:
            raise EndpointUnavailable(f"extractor endpoint {self.cfg.endpoint}: {exc}") from exc
        if response.status_code >= 500:
            raise EndpointUnavailable(
                f"extractor endpoint {self.cfg.endpoint} returned {response.status_code}"
            )
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise EndpointUnavailable(f"unexpected extractor reply shape: {exc}") from exc


def strip_code_fence(text: str) -> str:
    """Pull the payload out of a markdown code fence, if any."""
    if "```" not in text:
        return text.strip()
    first = text.index("```")
    rest = text[first + 3 :]
    newline = rest.find("\n")
    if newline >= 0 and rest[:newline].strip().isalnum():
        rest = rest[newline + 1 :]  # drop a language tag like ``json``
    closing = rest.find("```")
    if closing >= 0:
        rest = rest[:closing]
    return rest.strip()


class _MalformedReply(Exception):
    pass


def _parse_reply(reply: str) -> ProceduralState:
    text = strip_code_fence(reply)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _MalformedReply(f"reply is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise _MalformedReply("reply JSON is not an object")
    try:
        return validate_state(raw)
    except SchemaError as exc:
        raise _MalformedReply(str(exc)) from exc


def extract_state(
    req: ExtractionRequest,
    cfg: ExtractorConfig,
    transport: Optional[VLMTransport] = None,
) -> StateOrSentinel:
    """One extraction with retry-on-malformed and configured fallback.

    The fallback ladder after exhaustion: ``previous_state`` returns the
    last history state (or the skip-adaptation sentinel when there is no
    history yet), ``base_only`` returns the sentinel, ``fail`` raises.
    """
    if transport is None:
        transport = HttpVLMTransport(cfg)
    system_text, user_parts = build_prompt(req)
    notices: list[dict] = []
    last_error: Optional[_MalformedReply] = None
    for _attempt in range(cfg.max_retries + 1):
        payload = {
            "model": cfg.model_id,
            "messages": [
                {"role": "system", "content": [{"type": "text", "text": system_text}]},
                {"role": "user", "content": user_parts + notices},
            ],
        }
        reply = transport.complete(payload)
        try:
            return _parse_reply(reply)
        except _MalformedReply as exc:
            last_error = exc
            notices.append({"type": "text", "text": CORRECTION_NOTICE})

    if cfg.fallback_policy == "previous_state":
        if req.history:
            return req.history[-1].state
        return BASE_ONLY
    if cfg.fallback_policy == "base_only":
        return BASE_ONLY
    raise ExtractionFailed(
        f"no valid state after {cfg.max_retries + 1} attempts: {last_error}"
    )


def record_step(
    history: Sequence[HistoryEntry],
    step_index: int,
    observation_ref: str,
    state: ProceduralState,
) -> list[HistoryEntry]:
    """Append one step and re-dedup; step indices must strictly increase."""
    history = list(history)
    if history and step_index <= history[-1].step_index:
        raise NonMonotonicStep(
            f"step_index {step_index} is not greater than {history[-1].step_index}"
        )
    history.append(HistoryEntry(step_index=step_index, observation_ref=observation_ref, state=state))
    return dedup_history(history)
