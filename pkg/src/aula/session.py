"""The live multi-agent classroom session.

One session is one logical state machine: a publishable lecture
package, a roster of agent profiles plus exactly one human, a cursor
into the script, and an append-only history. A hidden manager decides
who acts next; in continuous mode with no pending student message the
decision is deterministic (teacher, next script item), otherwise it is
provider-backed and clamped to legal outputs (illegal provider output
falls back to the teacher advancing the script).

After an action executes, interactive sessions (and AskQuestion in any
mode) enter a waiting phase with deadline now + tau; a student message
preempts the deadline, otherwise expiry lets the class move on. Timer
expiry and user messages are applied as queued, serialized commands
(each public method takes the session lock); many sessions run
concurrently, one executor each.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .agents import AgentProfile, KIND_TEACHER, KIND_USER, USER_AGENT_ID, user_profile
from .errors import AulaError
from .package import LecturePackage, validate_package
from .providers import ProviderGateway, chat_request
from .script import ASK_QUESTION, READ_SCRIPT, SHOW_FILE, TeachingAction
from .templates import render_template
from .transcript import (
    KIND_PAGE_CHANGE,
    KIND_PHASE_CHANGE,
    KIND_UTTERANCE,
    Record,
    Transcript,
    TranscriptWriter,
)

MODE_CONTINUOUS = "continuous"
MODE_INTERACTIVE = "interactive"
MODES = (MODE_CONTINUOUS, MODE_INTERACTIVE)

PHASE_AWAITING = "awaiting_decision"
PHASE_WAITING = "waiting"
PHASE_EXECUTING = "executing"
PHASE_PAUSED = "paused"
PHASE_CLOSED = "closed"

DEFAULT_TAU = 8.0
HISTORY_WINDOW = 30

ACTION_SCRIPT = "script"
ACTION_SPEAK = "speak"


class SessionClosed(AulaError):
    pass


class EndOfScript(AulaError):
    """Signals class completion; the script cursor reached the end."""


class EmptyMessage(AulaError):
    pass


class UnpublishedPackage(AulaError):
    pass


class NoTeacherSelected(AulaError):
    pass


class UnknownAgent(AulaError):
    pass


@dataclass(frozen=True)
class Utterance:
    seq: int
    speaker: str
    text: str
    action: dict | None
    timestamp: float


@dataclass(frozen=True)
class Decision:
    next_speaker: str
    action_kind: str
    directive: str = ""
    item_index: int | None = None
    rationale: str = ""


class SimClock:
    """Manually advanced clock for deterministic sessions and tests."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = start

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("clock only advances")
        self._now += dt
        return self._now

    def advance_to(self, t: float) -> float:
        if t > self._now:
            self._now = t
        return self._now

    def __call__(self) -> float:
        return self._now


class ClassroomSession:
    """State machine for one classroom; construct via create_session."""

    def __init__(self, session_id: str, pkg: LecturePackage,
                 roster: dict[str, AgentProfile], mode: str,
                 tau: float, clock, gateway: ProviderGateway | None,
                 transcript_path: str | Path | None,
                 include_role_descriptions: bool) -> None:
        self.session_id = session_id
        self.pkg = pkg
        self.roster = roster
        self.mode = mode
        self.tau = tau
        self.clock = clock
        self.gateway = gateway
        self.include_role_descriptions = include_role_descriptions
        self.cursor = 0
        self.history: list[Utterance] = []
        self.phase = PHASE_AWAITING
        self.waiting_deadline: float | None = None
        self._seq = 0
        self._last_handled_seq = 0
        self._closed: Transcript | None = None
        self._lock = threading.RLock()
        self._writer = TranscriptWriter(transcript_path)
        self.meta = {
            "session_id": session_id,
            "deck_id": pkg.deck_id,
            "mode": mode,
            "roster": sorted(roster),
            "tau": tau,
            "created_ts": float(clock()),
        }
        self._writer.append(Record(0, self.meta["created_ts"], "", "meta", "", dict(self.meta)))

    # -- helpers ---------------------------------------------------------

    @property
    def teacher_id(self) -> str:
        for profile in self.roster.values():
            if profile.kind == KIND_TEACHER:
                return profile.id
        raise NoTeacherSelected("roster has no teacher")

    @property
    def records(self) -> list[Record]:
        return [r for r in self._writer.records if r.kind != "meta"]

    def _emit(self, kind: str, speaker: str, text: str, action: dict | None,
              ts: float) -> Record:
        self._seq += 1
        record = Record(self._seq, ts, speaker, kind, text, action)
        self._writer.append(record)
        if kind == KIND_UTTERANCE:
            self.history.append(Utterance(record.seq, speaker, text, action, ts))
        return record

    def _pending_user_text(self) -> str | None:
        for utt in reversed(self.history):
            if utt.seq <= self._last_handled_seq:
                break
            if utt.speaker == USER_AGENT_ID:
                return utt.text
        return None

    def current_page(self) -> int | None:
        """Page of the most recently executed script item, if known."""
        page_map = self.pkg.script.source_page_map
        for i in range(self.cursor - 1, -1, -1):
            if i in page_map:
                return page_map[i]
        return None

    # -- decision --------------------------------------------------------

    def _fallback_decision(self) -> Decision:
        if self.cursor < len(self.pkg.script):
            return Decision(self.teacher_id, ACTION_SCRIPT, item_index=self.cursor,
                            rationale="fallback: teacher advances the script")
        return Decision(self.teacher_id, ACTION_SPEAK,
                        directive="Answer the student's last message from the course material.",
                        rationale="fallback: script exhausted, teacher answers")

    def _manager_context(self, pending: str | None) -> dict:
        roster = []
        for profile in sorted(self.roster.values(), key=lambda p: p.id):
            entry: dict = {"id": profile.id, "kind": profile.kind,
                           "roles": sorted(profile.roles)}
            if self.include_role_descriptions and profile.kind != KIND_USER:
                entry["description"] = profile.role_description()
            roster.append(entry)
        page = self.current_page()
        desc = self.pkg.description_for(page) if page is not None else None
        next_item = None
        if self.cursor < len(self.pkg.script):
            next_item = self.pkg.script.items[self.cursor].summary()
        return {
            "mode": self.mode,
            "cursor": self.cursor,
            "script_length": len(self.pkg.script),
            "next_item": next_item,
            "page_description": desc.description if desc else "",
            "history": [
                {"speaker": u.speaker, "text": u.text}
                for u in self.history[-HISTORY_WINDOW:]
            ],
            "pending_user_message": pending,
            "roster": roster,
        }

    def _legal(self, decision: Decision) -> bool:
        profile = self.roster.get(decision.next_speaker)
        if profile is None or profile.kind == KIND_USER:
            return False
        if decision.action_kind == ACTION_SCRIPT:
            return profile.kind == KIND_TEACHER and self.cursor < len(self.pkg.script)
        if decision.action_kind == ACTION_SPEAK:
            return True
        return False

    def _parse_manager_reply(self, text: str) -> Decision | None:
        try:
            obj = json.loads(text)
            speaker = obj["speaker"]
            action = obj.get("action") or {}
            kind = action.get("kind")
        except (ValueError, TypeError, KeyError):
            return None
        if not isinstance(speaker, str) or kind not in (ACTION_SCRIPT, ACTION_SPEAK):
            return None
        directive = action.get("directive") or ""
        if not isinstance(directive, str):
            return None
        if kind == ACTION_SPEAK and not directive:
            directive = "Take one helpful turn for the class."
        return Decision(speaker, kind, directive,
                        item_index=self.cursor if kind == ACTION_SCRIPT else None,
                        rationale=str(obj.get("rationale", "")))

    def decide_next(self) -> Decision:
        """The manager function: class state to (speaker, action)."""
        with self._lock:
            if self.phase == PHASE_CLOSED:
                raise SessionClosed(self.session_id)
            pending = self._pending_user_text()
            at_end = self.cursor >= len(self.pkg.script)
            if self.mode == MODE_CONTINUOUS and pending is None:
                if at_end:
                    raise EndOfScript(self.session_id)
                return Decision(self.teacher_id, ACTION_SCRIPT, item_index=self.cursor,
                                rationale="continuous progression")
            if at_end and pending is None:
                raise EndOfScript(self.session_id)
            if self.gateway is None:
                return self._fallback_decision()
            request = chat_request(
                render_template("manager"), self._manager_context(pending), task="manage")
            try:
                reply = self.gateway.complete_chat(request).text
            except AulaError:
                return self._fallback_decision()
            decision = self._parse_manager_reply(reply)
            if decision is None or not self._legal(decision):
                return self._fallback_decision()
            return decision

    # -- execution -------------------------------------------------------

    def _speak_text(self, decision: Decision, page_desc: str) -> str:
        profile = self.roster[decision.next_speaker]
        if self.gateway is None:
            return decision.directive
        context = {
            "directive": decision.directive,
            "speaker": {"id": profile.id, "display_name": profile.display_name},
            "page_description": page_desc,
            "history": [
                {"speaker": u.speaker, "text": u.text} for u in self.history[-10:]
            ],
        }
        request = chat_request(profile.system_prompt, context, task="speak", temperature=0.7)
        try:
            return self.gateway.complete_chat(request).text
        except AulaError:
            return decision.directive

    def _execute(self, decision: Decision, now: float) -> tuple[list[Record], bool]:
        emitted: list[Record] = []
        asked_question = False
        if decision.action_kind == ACTION_SCRIPT:
            item: TeachingAction = self.pkg.script.items[self.cursor]
            if item.action_type == READ_SCRIPT:
                emitted.append(self._emit(
                    KIND_UTTERANCE, decision.next_speaker, str(item.value),
                    item.summary(), now))
            elif item.action_type == SHOW_FILE:
                emitted.append(self._emit(
                    KIND_PAGE_CHANGE, decision.next_speaker, "",
                    {"type": SHOW_FILE, "page": item.value}, now))
            elif item.action_type == ASK_QUESTION:
                stems = []
                for qid in item.value:  # type: ignore[union-attr]
                    question = self.pkg.question_by_id(qid)
                    stems.append(question.stem if question else qid)
                emitted.append(self._emit(
                    KIND_UTTERANCE, decision.next_speaker, "\n".join(stems),
                    item.summary(), now))
                asked_question = True
            else:
                emitted.append(self._emit(
                    KIND_UTTERANCE, decision.next_speaker, str(item.value),
                    item.summary(), now))
            self.cursor += 1
        else:
            page = self.current_page()
            desc = self.pkg.description_for(page) if page is not None else None
            text = self._speak_text(decision, desc.description if desc else "")
            emitted.append(self._emit(
                KIND_UTTERANCE, decision.next_speaker, text,
                {"type": ACTION_SPEAK}, now))
        return emitted, asked_question

    def step(self, now: float | None = None) -> list[Record]:
        """Run one decision/execution cycle; returns the emitted records.

        No-op while paused, or while waiting with an unexpired deadline.
        Raises EndOfScript when the class has completed.
        """
        with self._lock:
            if self.phase == PHASE_CLOSED:
                raise SessionClosed(self.session_id)
            if self.phase == PHASE_PAUSED:
                return []
            now = float(self.clock()) if now is None else now
            if self.phase == PHASE_WAITING:
                if self.waiting_deadline is not None and now < self.waiting_deadline:
                    return []
                self.waiting_deadline = None
                self.phase = PHASE_AWAITING
                timeout_rec = self._emit(
                    KIND_PHASE_CHANGE, "", PHASE_AWAITING, {"reason": "timeout"}, now)
            else:
                timeout_rec = None
            decision = self.decide_next()
            self._last_handled_seq = self._seq
            self.phase = PHASE_EXECUTING
            emitted, asked_question = self._execute(decision, now)
            if timeout_rec is not None:
                emitted.insert(0, timeout_rec)
            if asked_question or self.mode == MODE_INTERACTIVE:
                self.phase = PHASE_WAITING
                self.waiting_deadline = now + self.tau
                emitted.append(self._emit(
                    KIND_PHASE_CHANGE, "", PHASE_WAITING,
                    {"deadline": self.waiting_deadline, "tau": self.tau}, now))
            else:
                self.phase = PHASE_AWAITING
            return emitted

    def post_user_message(self, text: str) -> Record:
        """Append a student message; preempts the waiting window."""
        with self._lock:
            if self.phase == PHASE_CLOSED:
                raise SessionClosed(self.session_id)
            if not text or not text.strip():
                raise EmptyMessage("message text is empty")
            now = float(self.clock())
            record = self._emit(KIND_UTTERANCE, USER_AGENT_ID, text, None, now)
            if self.phase == PHASE_WAITING:
                self.waiting_deadline = None
                self.phase = PHASE_AWAITING
                self._emit(KIND_PHASE_CHANGE, "", PHASE_AWAITING,
                           {"reason": "preempted"}, now)
            return record

    def control(self, command: str, *, mode: str | None = None,
                cursor: int | None = None) -> list[Record]:
        with self._lock:
            if self.phase == PHASE_CLOSED:
                raise SessionClosed(self.session_id)
            now = float(self.clock())
            emitted: list[Record] = []
            if command == "pause":
                if self.phase != PHASE_PAUSED:
                    self.waiting_deadline = None
                    self.phase = PHASE_PAUSED
                    emitted.append(self._emit(
                        KIND_PHASE_CHANGE, "", PHASE_PAUSED, {"command": "pause"}, now))
            elif command == "resume":
                if self.phase == PHASE_PAUSED:
                    self.phase = PHASE_AWAITING
                    emitted.append(self._emit(
                        KIND_PHASE_CHANGE, "", PHASE_AWAITING, {"command": "resume"}, now))
            elif command == "set_mode":
                if mode not in MODES:
                    raise ValueError(f"unknown mode: {mode!r}")
                self.mode = mode
                emitted.append(self._emit(
                    KIND_PHASE_CHANGE, "", self.phase,
                    {"command": "set_mode", "mode": mode}, now))
            elif command == "seek":
                if cursor is None:
                    raise ValueError("seek needs a cursor")
                self.cursor = max(0, min(len(self.pkg.script), cursor))
                page = self.current_page()
                action: dict = {"type": "Seek", "cursor": self.cursor}
                if page is not None:
                    action["page"] = page
                emitted.append(self._emit(KIND_PAGE_CHANGE, "", "", action, now))
            else:
                raise ValueError(f"unknown control command: {command!r}")
            return emitted

    def close(self) -> Transcript:
        """Finalize and return the transcript; idempotent."""
        with self._lock:
            if self._closed is not None:
                return self._closed
            now = float(self.clock())
            self._emit(KIND_PHASE_CHANGE, "", PHASE_CLOSED, {"command": "close"}, now)
            self.phase = PHASE_CLOSED
            self.waiting_deadline = None
            self._writer.close()
            self._closed = Transcript(dict(self.meta), tuple(self.records))
            return self._closed


def create_session(pkg: LecturePackage, selected_agents: list[str] | tuple[str, ...],
                   mode: str = MODE_CONTINUOUS, *,
                   session_id: str | None = None,
                   tau: float = DEFAULT_TAU,
                   gateway: ProviderGateway | None = None,
                   clock=time.time,
                   transcript_path: str | Path | None = None,
                   include_role_descriptions: bool = True) -> ClassroomSession:
    """Start a classroom over a publishable package.

    The roster is the selected agent profiles plus the human student;
    it must include the package's teacher.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode: {mode!r}")
    report = validate_package(pkg)
    if not report.publishable:
        raise UnpublishedPackage(
            f"package {pkg.deck_id!r} is not publishable "
            f"({len(report.errors)} errors, drafts pending)")
    roster: dict[str, AgentProfile] = {}
    for agent_id in selected_agents:
        profile = pkg.agent_by_id(agent_id)
        if profile is None:
            raise UnknownAgent(f"agent {agent_id!r} not in package roster")
        roster[profile.id] = profile
    if not any(p.kind == KIND_TEACHER for p in roster.values()):
        raise NoTeacherSelected("selection must include the teacher")
    roster[USER_AGENT_ID] = user_profile()
    return ClassroomSession(
        session_id or f"s-{uuid.uuid4().hex[:12]}",
        pkg, roster, mode, tau, clock, gateway, transcript_path,
        include_role_descriptions,
    )


def run_headless(pkg: LecturePackage, mode: str = MODE_CONTINUOUS, *,
                 turns: int | None = None,
                 says: dict[int, str] | None = None,
                 selected_agents: list[str] | None = None,
                 tau: float = DEFAULT_TAU,
                 gateway: ProviderGateway | None = None,
                 session_id: str | None = None,
                 transcript_path: str | Path | None = None,
                 include_role_descriptions: bool = True) -> Transcript:
    """Drive a session with a scripted student under a simulated clock.

    ``says`` maps turn number (0-based) to a message the student posts
    before that turn's step; waiting windows expire by advancing the
    simulated clock, so runs are deterministic and instant.
    """
    says = says or {}
    clock = SimClock()
    if selected_agents is None:
        selected_agents = [a.id for a in pkg.agents]
    session = create_session(
        pkg, selected_agents, mode, session_id=session_id, tau=tau,
        gateway=gateway, clock=clock, transcript_path=transcript_path,
        include_role_descriptions=include_role_descriptions)
    turn = 0
    while turns is None or turn < turns:
        if turn in says:
            session.post_user_message(says[turn])
        if session.phase == PHASE_WAITING and session.waiting_deadline is not None:
            clock.advance_to(session.waiting_deadline)
        try:
            session.step()
        except EndOfScript:
            break
        turn += 1
    return session.close()
