"""Text-embedding acquisition.

Backends share a tiny interface (a ``model_id`` attribute and an
``embed(text)`` method returning an EmbeddingVector). Three backends ship
here: a remote HTTP embedder, a one-hot fixture over the closed vocabulary
of canonical field texts, and a hash-seeded pseudo-random fixture. Any
backend can be wrapped in a content-addressed persistent cache.

All similarity math runs in double precision regardless of how vectors
arrived, which keeps test tolerances independent of accumulation order.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import requests

from .errors import (
    DimensionMismatch,
    EndpointUnavailable,
    MalformedResponse,
    UnknownVocabularyString,
    ZeroVector,
)
from .schema import all_canonical_texts

ONEHOT_MODEL_ID = "onehot-fixture-v1"


@dataclass(frozen=True)
class EmbeddingVector:
    """A dense embedding with its originating model id."""

    model_id: str
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise MalformedResponse("embedding vector is empty")
        if not all(math.isfinite(v) for v in self.values):
            raise MalformedResponse("embedding vector contains non-finite entries")

    @property
    def dims(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """Cosine similarity in double precision, clipped to [-1, 1]."""
    if u.dims != v.dims:
        raise DimensionMismatch(f"cosine over dims {u.dims} vs {v.dims}")
    a = u.as_array()
    b = v.as_array()
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    value = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, value))


class Embedder(Protocol):
    model_id: str

    def embed(self, text: str) -> EmbeddingVector: ...


class OneHotEmbedder:
    """Fixture embedder over the closed vocabulary of canonical field texts.

    Each vocabulary string maps to a distinct standard basis vector, so
    cosine similarity is exactly 1.0 for equal strings and 0.0 otherwise.
    """

    def __init__(self):
        self.model_id = ONEHOT_MODEL_ID
        self._index = {text: i for i, text in enumerate(all_canonical_texts())}
        self._dims = len(self._index)

    def embed(self, text: str) -> EmbeddingVector:
        _require_text(text)
        try:
            hot = self._index[text]
        except KeyError:
            raise UnknownVocabularyString(f"not in closed vocabulary: {text!r}") from None
        values = [0.0] * self._dims
        values[hot] = 1.0
        return EmbeddingVector(self.model_id, tuple(values))


class HashedEmbedder:
    """Deterministic pseudo-random unit vectors derived from (seed, text).

    Values are expanded from SHA-256 digests, so identical inputs produce
    bit-identical vectors across processes and platforms.
    """

    def __init__(self, seed: int, dims: int):
        if dims < 8:
            raise ValueError(f"dims must be >= 8, got {dims}")
        self.seed = int(seed)
        self.dims = int(dims)
        self.model_id = f"hashed-fixture-s{self.seed}-d{self.dims}"

    def embed(self, text: str) -> EmbeddingVector:
        _require_text(text)
        gauss = _hash_gaussians(f"{self.seed}\x1f{text}", self.dims)
        arr = np.asarray(gauss, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:  # astronomically unlikely; reseed deterministically
            gauss = _hash_gaussians(f"{self.seed}\x1fretry\x1f{text}", self.dims)
            arr = np.asarray(gauss, dtype=np.float64)
            norm = float(np.linalg.norm(arr))
        return EmbeddingVector(self.model_id, tuple(arr / norm))


def _hash_gaussians(key: str, n: int) -> list[float]:
    """n standard Gaussians via SHA-256 counter expansion + Box-Muller."""
    uniforms: list[float] = []
    counter = 0
    # 2 uniforms per Gaussian pair; each digest yields 4 u64 draws.
    while len(uniforms) < n + (n % 2):
        digest = hashlib.sha256(f"{key}\x1f{counter}".encode("utf-8")).digest()
        for i in range(0, 32, 8):
            (word,) = struct.unpack_from("<Q", digest, i)
            # map to open interval (0, 1)
            uniforms.append((word + 1) / (2**64 + 1))
        counter += 1
    out: list[float] = []
    for i in range(0, n + (n % 2), 2):
        u1, u2 = uniforms[i], uniforms[i + 1]
        radius = math.sqrt(-2.0 * math.log(u1))
        out.append(radius * math.cos(2.0 * math.pi * u2))
        out.append(radius * math.sin(2.0 * math.pi * u2))
    return out[:n]


def onehot_fixture_embedder() -> OneHotEmbedder:
    return OneHotEmbedder()


def hashed_fixture_embedder(seed: int, dims: int) -> HashedEmbedder:
    return HashedEmbedder(seed, dims)


class RemoteEmbedder:
    """HTTP client for an embedding endpoint.

    Wire protocol: ``POST {model, input: [text]}`` returning
    ``{data: [{embedding: [...]}]}``. Transient transport failures are
    retried with exponential backoff before EndpointUnavailable is raised.
    """

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        timeout: float = 10.0,
        max_retries: int = 3,
        backoff_base: float = 0.25,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._session = session or requests.Session()
        self._expected_dims: Optional[int] = None

    def embed(self, text: str) -> EmbeddingVector:
        _require_text(text)
        payload = {"model": self.model_id, "input": [text]}
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
            else:
                if response.status_code >= 500:
                    last_error = MalformedResponse(f"server error {response.status_code}")
                else:
                    return self._parse(response)
            if attempt < self.max_retries and self.backoff_base > 0:
                time.sleep(self.backoff_base * (2**attempt))
        raise EndpointUnavailable(
            f"embedding endpoint {self.endpoint} unavailable after "
            f"{self.max_retries + 1} attempts: {last_error}"
        )

    def _parse(self, response: requests.Response) -> EmbeddingVector:
        try:
            body = response.json()
            values = body["data"][0]["embedding"]
            vector = EmbeddingVector(self.model_id, tuple(float(v) for v in values))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"unexpected embedding reply shape: {exc}") from exc
        if self._expected_dims is None:
            self._expected_dims = vector.dims
        elif vector.dims != self._expected_dims:
            raise DimensionMismatch(
                f"model {self.model_id!r} returned dims {vector.dims}, "
                f"expected {self._expected_dims}"
            )
        return vector


def _require_text(text: str) -> None:
    if not isinstance(text, str) or not text:
        raise ValueError("embedding input text must be a non-empty string")


def cache_digest(model_id: str, text: str) -> str:
    """Content hash of (model_id, exact input text)."""
    h = hashlib.sha256()
    h.update(b"procmem-embed-v1\x00")
    h.update(model_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(text.encode("utf-8"))
    return h.hexdigest()


@dataclass
class EmbedStats:
    hits: int = 0
    misses: int = 0
    # one (elapsed_ms, was_hit) record per embed() call, in call order
    calls: list[tuple[float, bool]] = field(default_factory=list)

    def miss_latencies_ms(self) -> list[float]:
        return [ms for ms, hit in self.calls if not hit]


class EmbedCache:
    """Content-addressed persistent store: one JSON file per digest.

    Writes go through a temp file plus rename, so concurrent writers of the
    same key converge to identical content and readers never observe a
    partial file. An append-only ``index.jsonl`` records digest -> input for
    inspection; the per-digest files are authoritative.
    """

    def __init__(self, cache_dir: str | os.PathLike):
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._index_path = self.root / "index.jsonl"

    def _path(self, digest: str) -> Path:
        return self.root / f"{digest}.json"

    def get(self, model_id: str, text: str) -> Optional[EmbeddingVector]:
        path = self._path(cache_digest(model_id, text))
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            record = json.load(fh)
        return EmbeddingVector(record["model_id"], tuple(record["values"]))

    def put(self, model_id: str, text: str, vector: EmbeddingVector) -> None:
        digest = cache_digest(model_id, text)
        record = {
            "model_id": model_id,
            "text": text,
            "dims": vector.dims,
            "values": list(vector.values),
        }
        payload = json.dumps(record).encode("utf-8")
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, self._path(digest))
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        with open(self._index_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"digest": digest, "model_id": model_id, "text": text}) + "\n")


class CachedEmbedder:
    """Wraps any embedder with the persistent cache.

    Cache hits return the stored vector bitwise, so similarity computed with
    and without the cache is identical.
    """

    def __init__(self, backend: Embedder, cache: EmbedCache):
        self.backend = backend
        self.cache = cache
        self.stats = EmbedStats()

    @property
    def model_id(self) -> str:
        return self.backend.model_id

    def peek(self, text: str) -> Optional[EmbeddingVector]:
        """Cache lookup only; never calls the backend."""
        return self.cache.get(self.model_id, text)

    def embed(self, text: str) -> EmbeddingVector:
        _require_text(text)
        start = time.perf_counter()
        vector = self.cache.get(self.model_id, text)
        hit = vector is not None
        if vector is None:
            vector = self.backend.embed(text)
            self.cache.put(self.model_id, text, vector)
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        if hit:
            self.stats.hits += 1
        else:
            self.stats.misses += 1
        self.stats.calls.append((elapsed_ms, hit))
        return vector


def make_embedder(spec: str, model_id: str = "", timeout: float = 10.0) -> Embedder:
    """Build an embedder backend from a config string.

    ``onehot`` selects the closed-vocabulary fixture, ``hashed:<seed>:<dims>``
    the pseudo-random fixture, anything else is treated as a remote endpoint
    URL (model_id required).
    """
    if spec == "onehot":
        return OneHotEmbedder()
    if spec.startswith("hashed:"):
        try:
            _, seed, dims = spec.split(":")
            return HashedEmbedder(int(seed), int(dims))
        except ValueError as exc:
            raise ValueError(f"bad hashed embedder spec {spec!r}: expected hashed:<seed>:<dims>") from exc
    if not model_id:
        raise ValueError("remote embedder requires a model id")
    return RemoteEmbedder(spec, model_id, timeout=timeout)
