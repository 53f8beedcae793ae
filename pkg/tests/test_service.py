import hashlib
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from procmem.bank import Bank
from procmem.container import read_adapter, write_adapter
from procmem.embed import OneHotEmbedder
from procmem.match import rank_results, select_top_k, task_relevance
from procmem.schema import StateSequence, state_to_dict
from procmem.service import (
    ServiceConfig,
    build_retrieval_payload,
    create_app,
    load_service_config,
)

from conftest import make_state, random_adapter_set

STATES = {
    "alpha": make_state(action="pick", entity_shape="spherical", ee_orientation="vertical", target_point="top"),
    "bravo": make_state(action="place", entity_shape="cuboid", ee_orientation="horizontal", target_point="rim"),
    "charlie": make_state(action="press", entity_shape="handle", ee_orientation="vertical", target_point="center"),
}


@pytest.fixture
def service_bank(tmp_path):
    rng = np.random.default_rng(55)
    bank = Bank.init(tmp_path / "bank", "onehot-fixture-v1")
    for task_id, state in STATES.items():
        path = tmp_path / f"{task_id}.lora"
        write_adapter(random_adapter_set(rng, adapter_id=task_id), path)
        bank.register_memory(task_id, StateSequence(task_id, (state,)), path)
    return tmp_path / "bank"


@pytest.fixture
def client(service_bank):
    cfg = ServiceConfig(bank=str(service_bank))
    app = create_app(cfg)
    return TestClient(app)


def test_health_ok(client):
    response = client.get("/v1/health")
    assert response.status_code == 200
    assert response.json()["status"] == "ok"


def test_health_503_while_loading(service_bank):
    cfg = ServiceConfig(bank=str(service_bank))
    app = create_app(cfg, defer_load=True)
    with TestClient(app) as tc:
        assert tc.get("/v1/health").status_code == 503
        assert tc.post("/v1/retrieve", json={"state": state_to_dict(STATES["alpha"])}).status_code == 503
        app.state.load()
        assert tc.get("/v1/health").status_code == 200


def test_memories_summary(client):
    body = client.get("/v1/memories").json()
    assert body["count"] == 3
    assert body["embed_model_id"] == "onehot-fixture-v1"
    assert {m["task_id"] for m in body["memories"]} == set(STATES)
    assert all(m["n_states"] == 1 for m in body["memories"])


def test_retrieve_matches_in_process_results(client, service_bank):
    state = STATES["alpha"]
    response = client.post(
        "/v1/retrieve", json={"state": state_to_dict(state), "k": 2, "temperature": 1.0}
    )
    assert response.status_code == 200

    bank = Bank.load(service_bank)
    expected = build_retrieval_payload(bank, OneHotEmbedder(), state, 2, 1.0)
    assert json.dumps(response.json(), sort_keys=True) == json.dumps(expected, sort_keys=True)

    # and the payload mirrors the match module directly
    results = rank_results(
        task_relevance(state, e.states, OneHotEmbedder()) for e in bank.manifest.memories
    )
    plan = select_top_k(results, k=2)
    assert response.json()["plan"]["selected"] == list(plan.selected)
    assert response.json()["matches"][0]["task_id"] == "alpha"
    assert response.json()["matches"][0]["similarity"] == 1.0


def test_retrieve_clamps_large_k(client):
    response = client.post(
        "/v1/retrieve", json={"state": state_to_dict(STATES["bravo"]), "k": 50}
    )
    assert response.status_code == 200
    assert len(response.json()["plan"]["selected"]) == 3


def test_retrieve_rejects_bad_state(client):
    bad = state_to_dict(STATES["alpha"])
    bad["action"] = "grasp"
    assert client.post("/v1/retrieve", json={"state": bad}).status_code == 400
    assert client.post("/v1/retrieve", json={}).status_code == 400
    assert (
        client.post(
            "/v1/retrieve", json={"state": state_to_dict(STATES["alpha"]), "k": 0}
        ).status_code
        == 400
    )


def test_fuse_writes_artifact_with_digest(client):
    response = client.post(
        "/v1/fuse",
        json={"selected": ["alpha", "bravo"], "weights": [0.5, 0.5], "mode": "factor"},
    )
    assert response.status_code == 200
    body = response.json()
    adapter = read_adapter(body["path"])
    assert adapter.adapter_id == "fused:alpha+bravo"
    with open(body["path"], "rb") as fh:
        assert hashlib.sha256(fh.read()).hexdigest() == body["sha256"]


def test_fuse_rejects_unnormalized_weights(client):
    response = client.post(
        "/v1/fuse", json={"selected": ["alpha", "bravo"], "weights": [0.9, 0.5]}
    )
    assert response.status_code == 400


def test_fuse_rejects_unknown_task(client):
    response = client.post(
        "/v1/fuse", json={"selected": ["nope"], "weights": [1.0]}
    )
    assert response.status_code == 400


def test_fuse_delta_mode(client):
    response = client.post(
        "/v1/fuse",
        json={"selected": ["alpha", "charlie"], "weights": [0.25, 0.75], "mode": "delta"},
    )
    assert response.status_code == 200
    assert response.json()["mode"] == "delta"


def test_extract_without_endpoint_is_502(client):
    response = client.post(
        "/v1/extract", json={"image_b64": "", "instruction": "pick the bell", "history": []}
    )
    assert response.status_code == 502


def test_extract_proxies_mock_endpoint(service_bank, local_endpoint):
    reply = json.dumps(state_to_dict(STATES["charlie"]))
    ep = local_endpoint(
        lambda path, body: (200, {"choices": [{"message": {"content": reply}}]})
    )
    cfg = ServiceConfig(bank=str(service_bank), vlm_endpoint=ep.url, vlm_model="vlm")
    with TestClient(create_app(cfg)) as tc:
        response = tc.post(
            "/v1/extract",
            json={
                "image_b64": "aGk=",
                "instruction": "press the handle",
                "history": [
                    {"step_index": 0, "observation_ref": "o0", "state": state_to_dict(STATES["alpha"])}
                ],
            },
        )
    assert response.status_code == 200
    assert response.json()["state"] == state_to_dict(STATES["charlie"])


def test_extract_validates_body(client):
    assert client.post("/v1/extract", json={"instruction": ""}).status_code == 400
    assert (
        client.post(
            "/v1/extract",
            json={"instruction": "x", "history": [{"step_index": 0, "state": {"bad": 1}}]},
        ).status_code
        == 400
    )


def test_service_config_file_and_env(tmp_path, monkeypatch):
    cfg_file = tmp_path / "svc.cfg"
    cfg_file.write_text(
        "# comment\n"
        "listen = 0.0.0.0:9999\n"
        "bank = /from/file\n"
        "default_k = 2\n"
        "default_temperature = 0.5\n"
    )
    cfg = load_service_config(str(cfg_file))
    assert cfg.listen == "0.0.0.0:9999"
    assert cfg.bank == "/from/file"
    assert cfg.default_k == 2
    assert cfg.default_temperature == 0.5
    assert cfg.host == "0.0.0.0"
    assert cfg.port == 9999

    monkeypatch.setenv("PROCMEM_BANK", "/from/env")
    monkeypatch.setenv("PROCMEM_CACHE_DIR", "/cache/env")
    cfg = load_service_config(str(cfg_file))
    assert cfg.bank == "/from/env"
    assert cfg.cache_dir == "/cache/env"


def test_service_config_rejects_unknown_keys(tmp_path):
    cfg_file = tmp_path / "svc.cfg"
    cfg_file.write_text("mystery = 1\n")
    with pytest.raises(ValueError):
        load_service_config(str(cfg_file))


def test_service_config_rejects_bad_lines(tmp_path):
    cfg_file = tmp_path / "svc.cfg"
    cfg_file.write_text("no equals sign here\n")
    with pytest.raises(ValueError):
        load_service_config(str(cfg_file))
