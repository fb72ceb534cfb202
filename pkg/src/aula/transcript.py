"""Append-only transcript persistence.

One JSON record per line, one line per classroom event, written as the
session runs (closing a session finalizes the file, it does not dump
it). This line format is the analytics contract:

    {"seq": 3, "ts": 12.5, "speaker": "teacher", "kind": "utterance",
     "text": "...", "action": {"type": "ReadScript"} | null}

``seq`` starts at 1 and increases by exactly 1 per record. The first
line of a file is a ``meta`` record with seq 0 carrying session
metadata in its ``action`` field. Event-stream kinds are ``utterance``,
``page_change``, ``phase_change`` and ``error``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

from .errors import AulaError

KIND_META = "meta"
KIND_UTTERANCE = "utterance"
KIND_PAGE_CHANGE = "page_change"
KIND_PHASE_CHANGE = "phase_change"
KIND_ERROR = "error"
EVENT_KINDS = (KIND_UTTERANCE, KIND_PAGE_CHANGE, KIND_PHASE_CHANGE, KIND_ERROR)

_REQUIRED_FIELDS = ("seq", "ts", "speaker", "kind", "text", "action")


class MalformedTranscript(AulaError):
    pass


@dataclass(frozen=True)
class Record:
    seq: int
    ts: float
    speaker: str
    kind: str
    text: str
    action: dict | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "ts": self.ts,
                "speaker": self.speaker,
                "kind": self.kind,
                "text": self.text,
                "action": self.action,
            },
            sort_keys=True,
            ensure_ascii=False,
        )


def record_from_dict(obj: dict, where: str = "") -> Record:
    for key in _REQUIRED_FIELDS:
        if key not in obj:
            raise MalformedTranscript(f"record missing {key!r}{where}")
    action = obj["action"]
    if action is not None and not isinstance(action, dict):
        raise MalformedTranscript(f"record action must be object or null{where}")
    try:
        return Record(
            int(obj["seq"]), float(obj["ts"]), str(obj["speaker"]),
            str(obj["kind"]), str(obj["text"]), action,
        )
    except (TypeError, ValueError) as exc:
        raise MalformedTranscript(f"bad record field{where}: {exc}")


class TranscriptWriter:
    """Appends records to an optional file and keeps them in memory."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[Record] = []
        self._fh: IO[str] | None = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8")

    def append(self, record: Record) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(record.to_json() + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass(frozen=True)
class Transcript:
    meta: dict = field(default_factory=dict)
    records: tuple[Record, ...] = ()

    def utterances(self) -> tuple[Record, ...]:
        return tuple(r for r in self.records if r.kind == KIND_UTTERANCE)

    def to_jsonl(self) -> str:
        meta_record = Record(0, float(self.meta.get("created_ts", 0.0)), "", KIND_META, "",
                             dict(self.meta))
        lines = [meta_record.to_json()]
        lines.extend(r.to_json() for r in self.records)
        return "\n".join(lines) + "\n"


def parse_transcript_lines(lines: Iterable[str]) -> Transcript:
    meta: dict = {}
    records: list[Record] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise MalformedTranscript(f"line {lineno}: not valid JSON ({exc})")
        if not isinstance(obj, dict):
            raise MalformedTranscript(f"line {lineno}: not an object")
        record = record_from_dict(obj, where=f" at line {lineno}")
        if record.kind == KIND_META:
            meta = dict(record.action or {})
        else:
            records.append(record)
    return Transcript(meta, tuple(records))


def read_transcript(path: str | Path) -> Transcript:
    return parse_transcript_lines(Path(path).read_text(encoding="utf-8").splitlines())


def iter_user_messages(transcript: Transcript, user_id: str = "user") -> Iterator[Record]:
    for record in transcript.records:
        if record.kind == KIND_UTTERANCE and record.speaker == user_id:
            yield record
