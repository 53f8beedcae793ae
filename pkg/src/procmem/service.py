"""HTTP service exposing retrieval and fusion to external policy processes.

All endpoints live under /v1 and speak JSON. The bank snapshot is loaded
once and shared read-only across requests; mutations go through the CLI.
Contract violations map to 400, upstream endpoint failures to 502, and a
not-yet-loaded bank to 503.
"""

from __future__ import annotations

import base64
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .bank import Bank
from .embed import CachedEmbedder, EmbedCache, Embedder, make_embedder
from .errors import (
    EmbedError,
    EndpointUnavailable,
    ExtractionFailed,
    ProcmemError,
    SchemaError,
)
from .extract import (
    BASE_ONLY,
    ExtractionRequest,
    ExtractorConfig,
    Observation,
    extract_state,
)
from .fuse import fuse, write_fused
from .match import FusionPlan, rank_results, select_top_k, task_relevance
from .schema import HistoryEntry, state_to_dict, validate_state

ENV_BANK = "PROCMEM_BANK"
ENV_EMBED_ENDPOINT = "PROCMEM_EMBED_ENDPOINT"
ENV_VLM_ENDPOINT = "PROCMEM_VLM_ENDPOINT"
ENV_CACHE_DIR = "PROCMEM_CACHE_DIR"


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8643"
    bank: str = ""
    embed_endpoint: str = "onehot"
    embed_model: str = ""
    vlm_endpoint: str = ""
    vlm_model: str = ""
    cache_dir: str = ""
    artifacts_dir: str = ""
    default_k: int = 1
    default_temperature: float = 1.0
    default_mode: str = "factor"

    def __post_init__(self):
        if self.default_k < 1:
            raise ValueError("default_k must be >= 1")
        if self.default_temperature <= 0:
            raise ValueError("default_temperature must be > 0")
        if self.default_mode not in ("factor", "delta"):
            raise ValueError(f"unknown default_mode: {self.default_mode!r}")

    @property
    def host(self) -> str:
        return self.listen.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen.rsplit(":", 1)[1])


def load_service_config(path: Optional[str] = None) -> ServiceConfig:
    """Parse the key = value config file, then apply environment overrides."""
    values: dict[str, str] = {}
    if path:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()

    for env, key in (
        (ENV_BANK, "bank"),
        (ENV_EMBED_ENDPOINT, "embed_endpoint"),
        (ENV_VLM_ENDPOINT, "vlm_endpoint"),
        (ENV_CACHE_DIR, "cache_dir"),
    ):
        if os.environ.get(env):
            values[key] = os.environ[env]

    known = {f.name for f in ServiceConfig.__dataclass_fields__.values()}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown service config keys: {sorted(unknown)}")

    kwargs: dict = dict(values)
    for int_key in ("default_k",):
        if int_key in kwargs:
            kwargs[int_key] = int(kwargs[int_key])
    for float_key in ("default_temperature",):
        if float_key in kwargs:
            kwargs[float_key] = float(kwargs[float_key])
    return ServiceConfig(**kwargs)


def build_retrieval_payload(
    bank: Bank,
    embedder: Embedder,
    state,
    k: int,
    temperature: float,
    mode: str = "factor",
) -> dict:
    """The /v1/retrieve response body; also what the CLI prints with --json."""
    results = rank_results(
        task_relevance(state, entry.states, embedder)
        for entry in bank.manifest.memories
    )
    plan = select_top_k(results, k=k, temperature=temperature, mode=mode)
    return {
        "matches": [
            {
                "task_id": r.task_id,
                "similarity": r.similarity,
                "best_state_index": r.best_state_index,
            }
            for r in results
        ],
        "plan": {"selected": list(plan.selected), "weights": list(plan.weights)},
    }


class ServiceState:
    """Everything a loaded service needs; absent while the bank reloads."""

    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        bank_root = Path(cfg.bank)
        self.bank = Bank.load(bank_root)
        cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else bank_root / "embed_cache"
        backend = make_embedder(cfg.embed_endpoint, cfg.embed_model)
        self.embedder: Embedder = CachedEmbedder(backend, EmbedCache(cache_dir))
        self.artifacts_dir = Path(cfg.artifacts_dir) if cfg.artifacts_dir else bank_root / "artifacts"


def create_app(cfg: ServiceConfig, defer_load: bool = False) -> FastAPI:
    app = FastAPI(title="procmem", version="1")
    app.state.cfg = cfg
    app.state.svc = None

    def load() -> None:
        app.state.svc = ServiceState(cfg)

    if not defer_load:
        load()
    app.state.load = load

    def svc_or_503():
        svc: Optional[ServiceState] = app.state.svc
        if svc is None:
            return None, JSONResponse({"error": "bank is loading"}, status_code=503)
        return svc, None

    @app.get("/v1/health")
    def health():
        svc, busy = svc_or_503()
        if busy:
            return busy
        return JSONResponse({"status": "ok", "memories": len(svc.bank)})

    @app.get("/v1/memories")
    def memories():
        svc, busy = svc_or_503()
        if busy:
            return busy
        manifest = svc.bank.manifest
        return JSONResponse(
            {
                "version": manifest.version,
                "embed_model_id": manifest.embed_model_id,
                "count": len(manifest.memories),
                "memories": [
                    {
                        "task_id": entry.task_id,
                        "n_states": len(entry.states),
                        "adapter_ref": entry.adapter_ref,
                    }
                    for entry in manifest.memories
                ],
            }
        )

    @app.post("/v1/retrieve")
    async def retrieve(request: Request):
        svc, busy = svc_or_503()
        if busy:
            return busy
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "body is not valid JSON"}, status_code=400)
        if not isinstance(body, dict) or "state" not in body:
            return JSONResponse({"error": "body must carry a 'state' object"}, status_code=400)
        try:
            state = validate_state(body["state"])
            k = int(body.get("k", cfg.default_k))
            temperature = float(body.get("temperature", cfg.default_temperature))
            if k < 1 or temperature <= 0:
                raise ValueError("k must be >= 1 and temperature > 0")
        except (SchemaError, ValueError, TypeError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        if len(svc.bank) == 0:
            return JSONResponse({"error": "bank has no memories"}, status_code=400)
        try:
            payload = build_retrieval_payload(
                svc.bank, svc.embedder, state, k, temperature, cfg.default_mode
            )
        except (EndpointUnavailable, EmbedError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=502)
        return JSONResponse(payload)

    @app.post("/v1/fuse")
    async def fuse_endpoint(request: Request):
        svc, busy = svc_or_503()
        if busy:
            return busy
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "body is not valid JSON"}, status_code=400)
        try:
            selected = list(body["selected"])
            weights = [float(w) for w in body["weights"]]
            mode = body.get("mode", cfg.default_mode)
            plan = FusionPlan(
                selected=tuple(selected),
                weights=tuple(weights),
                mode=mode,
                temperature=float(body.get("temperature", cfg.default_temperature)),
            )
            sets = [svc.bank.adapter_set(task_id) for task_id in plan.selected]
        except (KeyError, TypeError, ValueError, ProcmemError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        try:
            fused = fuse(plan, sets)
            svc.artifacts_dir.mkdir(parents=True, exist_ok=True)
            request_key = hashlib.sha256(
                repr((plan.selected, plan.weights, plan.mode)).encode("utf-8")
            ).hexdigest()[:12]
            path = svc.artifacts_dir / f"fused-{request_key}.lora"
            write_fused(fused, path)
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
        except ProcmemError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return JSONResponse(
            {
                "path": str(path),
                "sha256": digest,
                "mode": fused.mode,
                "selected": list(plan.selected),
                "weights": list(plan.weights),
            }
        )

    @app.post("/v1/extract")
    async def extract_endpoint(request: Request):
        svc, busy = svc_or_503()
        if busy:
            return busy
        try:
            body = await request.json()
            image_b64 = body.get("image_b64", "")
            instruction = body["instruction"]
            history_raw = body.get("history", [])
            history = []
            for item in history_raw:
                history.append(
                    HistoryEntry(
                        step_index=int(item["step_index"]),
                        observation_ref=str(item.get("observation_ref", "")),
                        state=validate_state(item["state"]),
                    )
                )
            req = ExtractionRequest(
                observation=Observation(
                    image_bytes=base64.b64decode(image_b64) if image_b64 else b"",
                    ref="service-extract",
                ),
                instruction=instruction,
                history=tuple(history),
            )
        except (KeyError, TypeError, ValueError, SchemaError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        if not cfg.vlm_endpoint:
            return JSONResponse({"error": "no extractor endpoint configured"}, status_code=502)
        extractor_cfg = ExtractorConfig(
            endpoint=cfg.vlm_endpoint,
            model_id=cfg.vlm_model,
            fallback_policy="fail",
        )
        try:
            state = extract_state(req, extractor_cfg)
        except (EndpointUnavailable, ExtractionFailed) as exc:
            return JSONResponse({"error": str(exc)}, status_code=502)
        if state is BASE_ONLY:
            return JSONResponse({"error": "extraction yielded no state"}, status_code=502)
        return JSONResponse({"state": state_to_dict(state)})

    return app


def serve(cfg: ServiceConfig) -> None:
    import uvicorn

    app = create_app(cfg)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
