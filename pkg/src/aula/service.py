"""The operational surface: HTTP + streaming API over courses and sessions.

Persistence is plain files, directory per course and one transcript
file per session, under the configured data directory. Session events
stream as server-sent events with ``Last-Event-ID`` resume; user
messages and control commands go over plain POSTs and are serialized
through the owning session's lock.

With the mock provider and ``simulated_time`` the whole service is
deterministic: sessions advance synchronously (the waiting window is
fast-forwarded in continuous mode) and every transcript is
byte-reproducible. In real-time mode each live session gets a runner
thread that advances the class and honors waiting-window deadlines.
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import PlainTextResponse, Response, StreamingResponse

from .analytics import aggregate_engagement, classify_activities, message_metrics
from .errors import AulaError
from .offline import install_offline_handlers
from .package import (
    LecturePackage,
    _manifest_dict,
    approve_all,
    load_package,
    save_package,
    validate_package,
)
from .pipeline import InstructorInput, PipelineConfig, PreparationPipeline, apply_review
from .providers import MockProvider, OpenAIChatProvider, ProviderGateway
from .session import (
    MODE_CONTINUOUS,
    MODES,
    PHASE_PAUSED,
    PHASE_WAITING,
    ClassroomSession,
    EmptyMessage,
    EndOfScript,
    NoTeacherSelected,
    SessionClosed,
    SimClock,
    UnknownAgent,
    UnpublishedPackage,
    create_session,
)
from .transcript import Record

import time


class BadConfig(AulaError):
    pass


class PortInUse(AulaError):
    pass


@dataclass(frozen=True)
class ApiSession:
    """Bearer-token stub binding one token to one live session."""

    token: str
    user_id: str
    session_id: str
    expires_at: float


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8200
    data_dir: str = "./data"
    provider: str = "mock"
    provider_base_url: str = ""
    provider_model: str = ""
    provider_api_key: str = ""
    auth_token: str = ""
    tau: float = 8.0
    simulated_time: bool = False


def load_config(path: str | Path, env: dict | None = None) -> ServiceConfig:
    """Read the JSON config file; secrets come from environment overrides."""
    import os

    env = dict(os.environ if env is None else env)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BadConfig(f"config file not found: {path}")
    except ValueError as exc:
        raise BadConfig(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise BadConfig("config must be a JSON object")
    known = set(ServiceConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise BadConfig(f"unknown config keys: {sorted(unknown)}")
    raw.setdefault("provider", "mock")
    if env.get("AULA_PROVIDER_API_KEY"):
        raw["provider_api_key"] = env["AULA_PROVIDER_API_KEY"]
    if env.get("AULA_AUTH_TOKEN"):
        raw["auth_token"] = env["AULA_AUTH_TOKEN"]
    try:
        config = ServiceConfig(**raw)
    except TypeError as exc:
        raise BadConfig(str(exc))
    if config.provider not in ("mock", "openai"):
        raise BadConfig(f"unknown provider: {config.provider!r}")
    if config.provider == "openai" and not config.provider_base_url:
        raise BadConfig("openai provider needs provider_base_url")
    if not 0 < config.port < 65536:
        raise BadConfig(f"bad port: {config.port}")
    return config


def build_gateway(config: ServiceConfig) -> ProviderGateway:
    if config.provider == "mock":
        return ProviderGateway(install_offline_handlers(MockProvider()), sleep=lambda _s: None)
    backend = OpenAIChatProvider(
        config.provider_base_url, config.provider_model, config.provider_api_key)
    return ProviderGateway(backend)


class CourseStore:
    """Directory-per-course package persistence."""

    def __init__(self, data_dir: str | Path) -> None:
        self.root = Path(data_dir) / "courses"
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, deck_id: str) -> Path:
        safe = deck_id.replace("/", "_")
        return self.root / safe / "package.zip"

    def save(self, pkg: LecturePackage) -> None:
        path = self._path(pkg.deck_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(save_package(pkg))

    def load(self, deck_id: str) -> LecturePackage:
        path = self._path(deck_id)
        if not path.exists():
            raise HTTPException(404, f"no such course: {deck_id}")
        return load_package(path.read_bytes())

    def exists(self, deck_id: str) -> bool:
        return self._path(deck_id).exists()


@dataclass
class LiveSession:
    session: ClassroomSession
    clock: SimClock | None
    cond: threading.Condition = field(default_factory=threading.Condition)
    envelopes: list[dict] = field(default_factory=list)
    completed: bool = False
    runner: threading.Thread | None = None

    def sync(self) -> list[dict]:
        """Mirror newly persisted records into the event envelope list."""
        with self.cond:
            records = self.session.records
            fresh = []
            for record in records[len(self.envelopes):]:
                fresh.append(_envelope(self.session.session_id, record))
            self.envelopes.extend(fresh)
            if fresh:
                self.cond.notify_all()
            return fresh


def _envelope(session_id: str, record: Record) -> dict:
    return {
        "seq": record.seq,
        "session_id": session_id,
        "kind": record.kind,
        "payload": {
            "ts": record.ts,
            "speaker": record.speaker,
            "text": record.text,
            "action": record.action,
        },
    }


class SessionHub:
    """Owns every live session; one executor per session."""

    TOKEN_TTL_SECONDS = 24 * 3600.0

    def __init__(self, config: ServiceConfig, store: CourseStore,
                 gateway: ProviderGateway) -> None:
        self.config = config
        self.store = store
        self.gateway = gateway
        self.sessions: dict[str, LiveSession] = {}
        self.api_sessions: dict[str, ApiSession] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.data_dir = Path(config.data_dir) / "sessions"
        self.data_dir.mkdir(parents=True, exist_ok=True)

    def mint_token(self, live: LiveSession, user_id: str = "user") -> ApiSession:
        import secrets

        now = live.clock() if live.clock is not None else time.time()
        api = ApiSession(secrets.token_urlsafe(16), user_id,
                         live.session.session_id, now + self.TOKEN_TTL_SECONDS)
        self.api_sessions[api.token] = api
        return api

    def token_valid_for(self, token: str, session_id: str) -> bool:
        api = self.api_sessions.get(token)
        if api is None or api.session_id != session_id:
            return False
        live = self.sessions.get(session_id)
        now = live.clock() if live is not None and live.clock is not None else time.time()
        return now < api.expires_at

    def create(self, deck_id: str, roster: list[str], mode: str,
               tau: float | None = None) -> LiveSession:
        pkg = self.store.load(deck_id)
        with self._lock:
            session_id = f"s-{next(self._ids):06d}"
        clock = SimClock() if self.config.simulated_time else None
        session = create_session(
            pkg, roster, mode,
            session_id=session_id,
            tau=self.config.tau if tau is None else tau,
            gateway=self.gateway,
            clock=clock if clock is not None else time.time,
            transcript_path=self.data_dir / f"{session_id}.jsonl",
        )
        live = LiveSession(session, clock)
        self.sessions[session_id] = live
        if self.config.simulated_time:
            self.pump(live)
        else:
            live.runner = threading.Thread(
                target=self._run, args=(live,), name=f"session-{session_id}", daemon=True)
            live.runner.start()
        return live

    def get(self, session_id: str) -> LiveSession:
        live = self.sessions.get(session_id)
        if live is None:
            raise HTTPException(404, f"no such session: {session_id}")
        return live

    def pump(self, live: LiveSession) -> None:
        """Advance a simulated-time session until it needs outside input."""
        session = live.session
        guard = 10 * (len(session.pkg.script) + 10)
        for _ in range(guard):
            if session.phase in (PHASE_PAUSED,):
                break
            if session.phase == PHASE_WAITING:
                if session.mode != MODE_CONTINUOUS:
                    break
                assert live.clock is not None
                if session.waiting_deadline is not None:
                    live.clock.advance_to(session.waiting_deadline)
            try:
                session.step()
            except (EndOfScript, SessionClosed):
                live.completed = True
                break
        live.sync()

    def _run(self, live: LiveSession) -> None:
        session = live.session
        while True:
            with live.cond:
                if session.phase == "closed":
                    return
                if live.completed or session.phase == PHASE_PAUSED:
                    live.cond.wait(0.2)
                    continue
                if session.phase == PHASE_WAITING:
                    deadline = session.waiting_deadline
                    remaining = (deadline - time.time()) if deadline is not None else 0.2
                    if remaining > 0:
                        live.cond.wait(min(remaining, 0.2))
                        continue
            try:
                session.step()
            except EndOfScript:
                live.completed = True
            except SessionClosed:
                return
            live.sync()

    def post_message(self, live: LiveSession, text: str) -> Record:
        record = live.session.post_user_message(text)
        live.completed = False
        live.sync()
        if self.config.simulated_time:
            self.pump(live)
        else:
            with live.cond:
                live.cond.notify_all()
        return record

    def control(self, live: LiveSession, command: str, mode: str | None,
                cursor: int | None) -> None:
        live.session.control(command, mode=mode, cursor=cursor)
        if command in ("resume", "seek", "set_mode"):
            live.completed = False
        live.sync()
        if self.config.simulated_time and command in ("resume", "seek", "set_mode"):
            self.pump(live)
        elif not self.config.simulated_time:
            with live.cond:
                live.cond.notify_all()

    def close(self, live: LiveSession):
        transcript = live.session.close()
        live.sync()
        return transcript

    def close_all(self) -> None:
        for live in list(self.sessions.values()):
            try:
                self.close(live)
            except AulaError:
                pass


def _decode_pages(entries: list) -> list[tuple[int, bytes]]:
    pages: list[tuple[int, bytes]] = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "png_base64" not in entry:
            raise HTTPException(400, f"pages[{i}] needs png_base64")
        try:
            data = base64.b64decode(entry["png_base64"])
        except (ValueError, TypeError):
            raise HTTPException(400, f"pages[{i}].png_base64 is not valid base64")
        pages.append((int(entry.get("index", i + 1)), data))
    return pages


def build_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="aula", version="0.1.0")
    store = CourseStore(config.data_dir)
    gateway = build_gateway(config)
    hub = SessionHub(config, store, gateway)
    app.state.config = config
    app.state.store = store
    app.state.hub = hub

    def check_auth(request: Request, session_id: str | None = None) -> None:
        if not config.auth_token:
            return
        header = request.headers.get("authorization", "")
        if header == f"Bearer {config.auth_token}":
            return
        if session_id is not None and header.startswith("Bearer "):
            token = header[len("Bearer "):]
            if hub.token_valid_for(token, session_id):
                return
        raise HTTPException(401, "missing, invalid or expired bearer token")

    @app.exception_handler(AulaError)
    async def _aula_error(_request, exc: AulaError):
        status = 409 if isinstance(
            exc, (UnpublishedPackage, SessionClosed, EndOfScript)) else 400
        if isinstance(exc, (UnknownAgent, NoTeacherSelected, EmptyMessage)):
            status = 400
        return PlainTextResponse(str(exc), status_code=status)

    @app.post("/courses")
    async def upload_course(request: Request) -> dict:
        check_auth(request)
        body = await request.json()
        entries = body.get("pages")
        if not isinstance(entries, list) or not entries:
            raise HTTPException(400, "body needs a non-empty pages list")
        pages = _decode_pages(entries)
        deck_id = body.get("deck_id") or "deck-" + hashlib.sha256(
            b"".join(data for _, data in pages)).hexdigest()[:12]
        instructor_raw = body.get("instructor") or {}
        materials = tuple(
            (str(m["id"]), str(m["text"])) for m in instructor_raw.get("materials", []))
        inputs = InstructorInput(
            persona_notes=str(instructor_raw.get("persona_notes", "")),
            extended_materials=materials,
            rag_enabled=bool(instructor_raw.get("rag_enabled", True)),
        )
        options = body.get("options") or {}
        cfg = PipelineConfig(
            no_visual=bool(options.get("no_visual", False)),
            no_context=bool(options.get("no_context", False)),
            questions_per_page=int(options.get("questions_per_page", 1)),
        )
        pipeline = PreparationPipeline(gateway, cfg)
        pkg, run = pipeline.prepare(deck_id, pages, inputs)
        store.save(pkg)
        return {"deck_id": deck_id, "pages": len(pkg.pages), "stage": run.stage}

    @app.get("/courses/{deck_id}/package")
    async def get_package(deck_id: str, request: Request) -> dict:
        check_auth(request)
        pkg = store.load(deck_id)
        report = validate_package(pkg)
        return {
            "manifest": _manifest_dict(pkg),
            "report": _report_dict(report),
        }

    @app.put("/courses/{deck_id}/package")
    async def review_package(deck_id: str, request: Request) -> dict:
        check_auth(request)
        pkg = store.load(deck_id)
        body = await request.json()
        for entry in body.get("reviews", []):
            pkg = apply_review(
                pkg, str(entry["item_ref"]), str(entry["decision"]),
                content=entry.get("content"), note=str(entry.get("note", "")))
        store.save(pkg)
        return {"report": _report_dict(validate_package(pkg))}

    @app.post("/courses/{deck_id}/publish")
    async def publish_course(deck_id: str, request: Request) -> dict:
        check_auth(request)
        pkg = store.load(deck_id)
        body = {}
        if await request.body():
            body = await request.json()
        if body.get("approve_all"):
            pkg = approve_all(pkg)
        report = validate_package(pkg)
        if not report.publishable:
            raise HTTPException(409, detail=json.dumps(_report_dict(report)))
        store.save(pkg)
        return {"deck_id": deck_id, "publishable": True}

    @app.get("/courses/{deck_id}/pages/{index}")
    async def get_page_image(deck_id: str, index: int, request: Request) -> Response:
        check_auth(request)
        pkg = store.load(deck_id)
        data = pkg.page_images.get(index)
        if data is None:
            raise HTTPException(404, f"no page {index}")
        return Response(content=data, media_type="image/png")

    @app.post("/sessions")
    async def create_classroom(request: Request) -> dict:
        check_auth(request)
        body = await request.json()
        deck_id = body.get("course_id")
        if not deck_id:
            raise HTTPException(400, "body needs course_id")
        roster = body.get("roster")
        if not isinstance(roster, list) or not roster:
            raise HTTPException(400, "body needs a non-empty roster list")
        mode = body.get("mode", MODE_CONTINUOUS)
        if mode not in MODES:
            raise HTTPException(400, f"unknown mode {mode!r}")
        tau = body.get("tau")
        live = hub.create(deck_id, [str(a) for a in roster], mode,
                          float(tau) if tau is not None else None)
        api = hub.mint_token(live)
        return {
            "session_id": live.session.session_id,
            "roster": sorted(live.session.roster),
            "mode": live.session.mode,
            "phase": live.session.phase,
            "token": api.token,
            "expires_at": api.expires_at,
        }

    @app.get("/sessions/{session_id}/events")
    async def stream_events(session_id: str, request: Request, since: int = 0):
        check_auth(request, session_id)
        live = hub.get(session_id)
        last_header = request.headers.get("last-event-id")
        if last_header is not None:
            try:
                since = max(since, int(last_header))
            except ValueError:
                pass

        def generate():
            cursor = 0
            while True:
                with live.cond:
                    pending = [e for e in live.envelopes[cursor:]]
                    cursor = len(live.envelopes)
                    closed = live.session.phase == "closed"
                for env in pending:
                    if env["seq"] <= since:
                        continue
                    yield (f"id: {env['seq']}\n"
                           f"event: {env['kind']}\n"
                           f"data: {json.dumps(env, sort_keys=True, ensure_ascii=False)}\n\n")
                if closed:
                    return
                with live.cond:
                    if len(live.envelopes) == cursor:
                        live.cond.wait(0.2)

        return StreamingResponse(generate(), media_type="text/event-stream", headers={
            "Cache-Control": "no-cache",
            "X-Accel-Buffering": "no",
        })

    @app.post("/sessions/{session_id}/messages")
    async def post_message(session_id: str, request: Request) -> dict:
        check_auth(request, session_id)
        live = hub.get(session_id)
        body = await request.json()
        record = hub.post_message(live, str(body.get("text", "")))
        return {"seq": record.seq}

    @app.post("/sessions/{session_id}/control")
    async def control_classroom(session_id: str, request: Request) -> dict:
        check_auth(request, session_id)
        live = hub.get(session_id)
        body = await request.json()
        command = body.get("command")
        if command not in ("pause", "resume", "set_mode", "seek"):
            raise HTTPException(400, f"unknown command {command!r}")
        cursor = body.get("cursor")
        hub.control(live, command, body.get("mode"),
                    int(cursor) if cursor is not None else None)
        session = live.session
        return {"phase": session.phase, "mode": session.mode, "cursor": session.cursor}

    @app.post("/sessions/{session_id}/close")
    async def close_classroom(session_id: str, request: Request) -> dict:
        check_auth(request, session_id)
        live = hub.get(session_id)
        transcript = hub.close(live)
        return {"session_id": session_id, "records": len(transcript.records)}

    @app.get("/sessions/{session_id}/transcript")
    async def get_transcript(session_id: str, request: Request) -> PlainTextResponse:
        check_auth(request, session_id)
        live = hub.get(session_id)
        path = hub.data_dir / f"{session_id}.jsonl"
        if path.exists():
            return PlainTextResponse(path.read_text(encoding="utf-8"))
        lines = [r.to_json() for r in live.session._writer.records]
        return PlainTextResponse("\n".join(lines) + "\n")

    @app.get("/analytics/sessions/{session_id}/messages")
    async def analytics_messages(session_id: str, request: Request) -> dict:
        check_auth(request, session_id)
        live = hub.get(session_id)
        from .transcript import Transcript
        transcript = Transcript(dict(live.session.meta), tuple(live.session.records))
        records = message_metrics(transcript)
        return {
            "records": [
                {
                    "student_id": r.student_id,
                    "module_id": r.module_id,
                    "msg_num": r.msg_num,
                    "msg_len_mean": r.msg_len_mean,
                    "log_msg_num": r.log_msg_num,
                    "log_msg_len": r.log_msg_len,
                }
                for r in records
            ],
            "aggregate": aggregate_engagement(records),
        }

    @app.get("/analytics/sessions/{session_id}/activities")
    async def analytics_activities(session_id: str, request: Request) -> dict:
        check_auth(request, session_id)
        live = hub.get(session_id)
        from .transcript import Transcript
        transcript = Transcript(dict(live.session.meta), tuple(live.session.records))
        report = classify_activities(transcript)
        return {"counts": report.counts, "ratios": report.ratios}

    return app


def _report_dict(report) -> dict:
    return {
        "errors": [[i.ref, i.code, i.message] for i in report.errors],
        "warnings": [[i.ref, i.code, i.message] for i in report.warnings],
        "publishable": report.publishable,
    }


class ServiceHandle:
    """A running service; stop() drains sessions and joins the server."""

    def __init__(self, config: ServiceConfig, server, thread: threading.Thread,
                 app: FastAPI) -> None:
        self.config = config
        self._server = server
        self._thread = thread
        self.app = app

    @property
    def base_url(self) -> str:
        return f"http://{self.config.host}:{self.config.port}"

    def stop(self) -> None:
        hub: SessionHub = self.app.state.hub
        hub.close_all()
        self._server.should_exit = True
        self._thread.join(timeout=10)


def serve(config: ServiceConfig) -> ServiceHandle:
    """Start the service on its configured port; returns a handle."""
    import uvicorn

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((config.host, config.port))
    except OSError:
        raise PortInUse(f"{config.host}:{config.port} is already bound")
    finally:
        probe.close()

    app = build_app(config)
    server = uvicorn.Server(uvicorn.Config(
        app, host=config.host, port=config.port, log_level="warning"))
    thread = threading.Thread(target=server.run, name="aula-service", daemon=True)
    thread.start()
    import time as _time
    for _ in range(200):
        if server.started:
            break
        _time.sleep(0.025)
    return ServiceHandle(config, server, thread, app)
