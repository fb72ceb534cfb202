"""HTTP service tests: course lifecycle, event streaming, persistence."""

from __future__ import annotations

import base64
import json
import socket

import pytest
from fastapi.testclient import TestClient

import aula.service as service
from aula.service import BadConfig, PortInUse, ServiceConfig, build_app, load_config, serve
from conftest import make_png


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def upload_body(n_pages: int = 3, deck_id: str = "course-a") -> dict:
    return {
        "deck_id": deck_id,
        "pages": [{"index": i, "png_base64": b64(make_png(i))} for i in range(1, n_pages + 1)],
    }


@pytest.fixture
def client(tmp_path):
    config = ServiceConfig(data_dir=str(tmp_path), simulated_time=True)
    app = build_app(config)
    with TestClient(app) as tc:
        yield tc


def publish(client, deck_id="course-a", n_pages=3, mode="interactive",
            roster=("teacher", "assistant")) -> str:
    assert client.post("/courses", json=upload_body(n_pages, deck_id)).status_code == 200
    assert client.post(f"/courses/{deck_id}/publish",
                       json={"approve_all": True}).status_code == 200
    response = client.post("/sessions", json={
        "course_id": deck_id, "roster": list(roster), "mode": mode})
    assert response.status_code == 200
    return response.json()["session_id"]


def stream_events(client, session_id: str, since: int = 0,
                  headers: dict | None = None) -> list[dict]:
    events = []
    with client.stream("GET", f"/sessions/{session_id}/events",
                       params={"since": since}, headers=headers or {}) as response:
        assert response.status_code == 200
        for line in response.iter_lines():
            if line.startswith("data: "):
                events.append(json.loads(line[len("data: "):]))
    return events


# -- courses -------------------------------------------------------------------

def test_upload_and_package_round_trip(client):
    response = client.post("/courses", json=upload_body(4))
    assert response.status_code == 200
    assert response.json()["pages"] == 4
    package = client.get("/courses/course-a/package").json()
    assert len(package["manifest"]["pages"]) == 4
    assert package["report"]["publishable"] is False


def test_upload_without_pages_rejected(client):
    assert client.post("/courses", json={"pages": []}).status_code == 400


def test_deck_id_defaults_to_content_hash(client):
    body = upload_body(2)
    del body["deck_id"]
    deck_id = client.post("/courses", json=body).json()["deck_id"]
    assert deck_id.startswith("deck-")
    assert client.get(f"/courses/{deck_id}/package").status_code == 200


def test_publish_requires_approval(client):
    client.post("/courses", json=upload_body(2))
    bare = client.post("/courses/course-a/publish")
    assert bare.status_code == 409
    approved = client.post("/courses/course-a/publish", json={"approve_all": True})
    assert approved.status_code == 200
    assert approved.json()["publishable"] is True


def test_review_endpoint_applies_decisions(client):
    client.post("/courses", json=upload_body(1))
    response = client.put("/courses/course-a/package", json={"reviews": [
        {"item_ref": "description:1", "decision": "edit", "content": "Edited by hand."},
    ]})
    assert response.status_code == 200
    manifest = client.get("/courses/course-a/package").json()["manifest"]
    assert manifest["descriptions"][0]["description"] == "Edited by hand."
    assert manifest["descriptions"][0]["status"] == "approved"


def test_page_image_served(client):
    client.post("/courses", json=upload_body(2))
    response = client.get("/courses/course-a/pages/2")
    assert response.status_code == 200
    assert response.headers["content-type"] == "image/png"
    assert response.content == make_png(2)
    assert client.get("/courses/course-a/pages/9").status_code == 404


def test_unknown_course_is_404(client):
    assert client.get("/courses/nope/package").status_code == 404


def test_session_on_unpublished_course_is_409(client):
    client.post("/courses", json=upload_body(1))
    response = client.post("/sessions", json={
        "course_id": "course-a", "roster": ["teacher"], "mode": "continuous"})
    assert response.status_code == 409


# -- sessions ------------------------------------------------------------------

def test_interactive_session_flow(client):
    session_id = publish(client)
    posted = client.post(f"/sessions/{session_id}/messages",
                         json={"text": "What is a token?"})
    assert posted.status_code == 200
    closed = client.post(f"/sessions/{session_id}/close")
    assert closed.status_code == 200
    transcript = client.get(f"/sessions/{session_id}/transcript").text
    lines = [json.loads(line) for line in transcript.strip().splitlines()]
    assert lines[0]["kind"] == "meta"
    user_lines = [l for l in lines if l["kind"] == "utterance" and l["speaker"] == "user"]
    assert len(user_lines) == 1


def test_empty_message_rejected(client):
    session_id = publish(client)
    assert client.post(f"/sessions/{session_id}/messages",
                       json={"text": "  "}).status_code == 400


def test_continuous_session_runs_to_completion_on_create(client):
    session_id = publish(client, deck_id="course-b", mode="continuous")
    # Simulated time: the lecture already ran; close to terminate the stream.
    client.post(f"/sessions/{session_id}/close")
    events = stream_events(client, session_id, since=0)
    utterances = [e for e in events if e["kind"] == "utterance"
                  and e["payload"]["speaker"] == "teacher"]
    assert len(utterances) >= 3


def test_two_clients_see_identical_streams(client):
    session_id = publish(client)
    client.post(f"/sessions/{session_id}/messages", json={"text": "hello?"})
    client.post(f"/sessions/{session_id}/close")
    first = stream_events(client, session_id)
    second = stream_events(client, session_id)
    assert first == second
    seqs = [e["seq"] for e in first]
    assert seqs == list(range(1, len(seqs) + 1))


def test_resume_by_last_event_id_has_no_gaps_or_duplicates(client):
    session_id = publish(client)
    client.post(f"/sessions/{session_id}/messages", json={"text": "first"})
    client.post(f"/sessions/{session_id}/messages", json={"text": "second"})
    client.post(f"/sessions/{session_id}/close")
    everything = stream_events(client, session_id)
    cut = len(everything) // 2
    head = everything[:cut]
    tail = stream_events(client, session_id,
                         headers={"Last-Event-ID": str(head[-1]["seq"])})
    combined = [e["seq"] for e in head + tail]
    assert combined == list(range(1, len(everything) + 1))


def test_stream_matches_transcript_records(client):
    session_id = publish(client)
    client.post(f"/sessions/{session_id}/messages", json={"text": "compare me"})
    client.post(f"/sessions/{session_id}/close")
    events = stream_events(client, session_id)
    transcript_lines = [
        json.loads(line)
        for line in client.get(f"/sessions/{session_id}/transcript").text.strip().splitlines()
    ]
    records = [l for l in transcript_lines if l["kind"] != "meta"]
    assert [e["seq"] for e in events] == [r["seq"] for r in records]
    assert [e["payload"]["text"] for e in events] == [r["text"] for r in records]


def test_control_endpoint_round_trip(client):
    session_id = publish(client)
    paused = client.post(f"/sessions/{session_id}/control", json={"command": "pause"})
    assert paused.json()["phase"] == "paused"
    resumed = client.post(f"/sessions/{session_id}/control", json={"command": "resume"})
    assert resumed.json()["phase"] in ("awaiting_decision", "waiting")
    sought = client.post(f"/sessions/{session_id}/control",
                         json={"command": "seek", "cursor": 0})
    assert sought.json()["cursor"] == 0
    switched = client.post(f"/sessions/{session_id}/control",
                           json={"command": "set_mode", "mode": "continuous"})
    assert switched.json()["mode"] == "continuous"
    assert client.post(f"/sessions/{session_id}/control",
                       json={"command": "explode"}).status_code == 400


def test_message_to_closed_session_is_conflict(client):
    session_id = publish(client)
    client.post(f"/sessions/{session_id}/close")
    response = client.post(f"/sessions/{session_id}/messages", json={"text": "late"})
    assert response.status_code == 409


def test_analytics_endpoints(client):
    session_id = publish(client)
    client.post(f"/sessions/{session_id}/messages",
                json={"text": "Can you explain embeddings?"})
    client.post(f"/sessions/{session_id}/messages",
                json={"text": "Please go back to the previous slide"})
    messages = client.get(f"/analytics/sessions/{session_id}/messages").json()
    assert messages["records"][0]["msg_num"] == 2
    activities = client.get(f"/analytics/sessions/{session_id}/activities").json()
    assert activities["counts"]["knowledge_seeking"] == 1
    assert activities["counts"]["management"] == 1


def test_transcript_persisted_per_session_file(client, tmp_path):
    session_id = publish(client)
    client.post(f"/sessions/{session_id}/close")
    path = tmp_path / "sessions" / f"{session_id}.jsonl"
    assert path.exists()
    last = json.loads(path.read_text().strip().splitlines()[-1])
    assert last["kind"] == "phase_change"
    assert last["text"] == "closed"


# -- auth ----------------------------------------------------------------------

def test_bearer_token_stub(tmp_path):
    config = ServiceConfig(data_dir=str(tmp_path), simulated_time=True,
                           auth_token="sekrit")
    with TestClient(build_app(config)) as tc:
        denied = tc.post("/courses", json=upload_body(1))
        assert denied.status_code == 401
        allowed = tc.post("/courses", json=upload_body(1),
                          headers={"Authorization": "Bearer sekrit"})
        assert allowed.status_code == 200


# -- config / serve ------------------------------------------------------------

def test_load_config_applies_env_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"data_dir": str(tmp_path), "port": 9321}))
    config = load_config(path, env={"AULA_AUTH_TOKEN": "tok",
                                    "AULA_PROVIDER_API_KEY": "key"})
    assert config.port == 9321
    assert config.auth_token == "tok"
    assert config.provider_api_key == "key"


def test_load_config_rejects_bad_input(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(BadConfig):
        load_config(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(BadConfig):
        load_config(bad)
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"frobnicate": 1}))
    with pytest.raises(BadConfig):
        load_config(unknown)
    badprov = tmp_path / "prov.json"
    badprov.write_text(json.dumps({"provider": "quantum"}))
    with pytest.raises(BadConfig):
        load_config(badprov)


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def test_serve_real_port_and_graceful_drain(tmp_path):
    import httpx

    port = _free_port()
    config = ServiceConfig(host="127.0.0.1", port=port, data_dir=str(tmp_path),
                           simulated_time=True)
    handle = serve(config)
    try:
        base = handle.base_url
        assert httpx.post(f"{base}/courses", json=upload_body(2)).status_code == 200
        httpx.post(f"{base}/courses/course-a/publish", json={"approve_all": True})
        session_id = httpx.post(f"{base}/sessions", json={
            "course_id": "course-a", "roster": ["teacher"], "mode": "interactive",
        }).json()["session_id"]
    finally:
        handle.stop()
    # Drain finalized the open session's transcript on disk.
    path = tmp_path / "sessions" / f"{session_id}.jsonl"
    assert path.exists()
    last = json.loads(path.read_text().strip().splitlines()[-1])
    assert last["text"] == "closed"


def test_port_in_use_detected(tmp_path):
    port = _free_port()
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", port))
    blocker.listen(1)
    try:
        with pytest.raises(PortInUse):
            serve(ServiceConfig(port=port, data_dir=str(tmp_path)))
    finally:
        blocker.close()


def test_session_token_binding_and_expiry(tmp_path):
    config = ServiceConfig(data_dir=str(tmp_path), simulated_time=True,
                           auth_token="admin-token")
    app = build_app(config)
    with TestClient(app) as tc:
        admin = {"Authorization": "Bearer admin-token"}
        tc.post("/courses", json=upload_body(1), headers=admin)
        tc.post("/courses/course-a/publish", json={"approve_all": True}, headers=admin)
        created = tc.post("/sessions", json={
            "course_id": "course-a", "roster": ["teacher"], "mode": "interactive",
        }, headers=admin).json()
        session_id, token = created["session_id"], created["token"]
        assert created["expires_at"] > 0
        student = {"Authorization": f"Bearer {token}"}
        # The session token works for its own session only.
        ok = tc.post(f"/sessions/{session_id}/messages",
                     json={"text": "hi"}, headers=student)
        assert ok.status_code == 200
        assert tc.get("/courses/course-a/package", headers=student).status_code == 401
        # One live binding per token: a second session gets a fresh token.
        second = tc.post("/sessions", json={
            "course_id": "course-a", "roster": ["teacher"], "mode": "interactive",
        }, headers=admin).json()
        assert second["token"] != token
        denied = tc.post(f"/sessions/{second['session_id']}/messages",
                         json={"text": "hi"}, headers=student)
        assert denied.status_code == 401
        # Expired tokens are rejected.
        hub = app.state.hub
        api = hub.api_sessions[token]
        hub.api_sessions[token] = service.ApiSession(
            api.token, api.user_id, api.session_id, -1.0)
        late = tc.post(f"/sessions/{session_id}/messages",
                       json={"text": "again"}, headers=student)
        assert late.status_code == 401
