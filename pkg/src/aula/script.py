"""Lecture script markup: the instructional action language.

A script is plain text with teaching actions embedded as marker blocks:

    ⟦TypeName key=value …⟧payload⟦/⟧

The payload is raw text; ``⟦``, ``⟧`` and ``\\`` are escaped as ``\\⟦``,
``\\⟧`` and ``\\\\`` inside payloads and prose.  Attributes are
space-separated ``key=value`` tokens (values may not contain whitespace,
markers or backslashes).  Bare prose between blocks is implicitly a
ReadScript action.  This grammar is the bit-exact interface; documents
persist inside the lecture package as canonical markup text.

Value channels by payload kind:

* ``text``     - the block payload (ReadScript)
* ``page-ref`` - the ``page`` attribute, a 1-based slide index (ShowFile)
* ``id-set``   - the ``q`` attribute, comma-separated ids (AskQuestion)

Custom action types are registered by name with one of those payload
kinds; unregistered types parse with the raw payload as their value and
are flagged by :func:`validate_script`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import AulaError

OPEN = "⟦"   # ⟦
CLOSE = "⟧"  # ⟧
END_BLOCK = OPEN + "/" + CLOSE

READ_SCRIPT = "ReadScript"
SHOW_FILE = "ShowFile"
ASK_QUESTION = "AskQuestion"

KIND_TEXT = "text"
KIND_PAGE_REF = "page-ref"
KIND_ID_SET = "id-set"
PAYLOAD_KINDS = (KIND_TEXT, KIND_PAGE_REF, KIND_ID_SET)

PAGE_ATTR = "page"
IDS_ATTR = "q"

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_ATTR_KEY_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_-]*\Z")
_ATTR_VALUE_RE = re.compile(r"[^\s\\⟦⟧]+\Z")
_ID_RE = re.compile(r"[A-Za-z0-9_.:-]+\Z")


class ScriptParseError(AulaError):
    """Located parse failure; ``code`` is MalformedMarker or EmptyPayload."""

    def __init__(self, code: str, line: int, message: str):
        super().__init__(f"{code} at line {line}: {message}")
        self.code = code
        self.line = line
        self.message = message


class InvalidDocument(AulaError):
    """Raised by serialize_script when the document fails validation."""

    def __init__(self, issues: list[Issue]):
        super().__init__("; ".join(f"[{i.ref}] {i.code}: {i.message}" for i in issues))
        self.issues = tuple(issues)


@dataclass(frozen=True)
class Issue:
    ref: str
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Issue, ...] = ()
    warnings: tuple[Issue, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.errors


class ActionRegistry:
    """Known action types and their payload kinds.

    The three builtin actions are always present; custom types are added
    with :meth:`register` and declare where their value lives.
    """

    def __init__(self) -> None:
        self._kinds: dict[str, str] = {
            READ_SCRIPT: KIND_TEXT,
            SHOW_FILE: KIND_PAGE_REF,
            ASK_QUESTION: KIND_ID_SET,
        }

    @classmethod
    def builtin(cls) -> "ActionRegistry":
        return cls()

    def register(self, name: str, kind: str) -> None:
        if not _NAME_RE.match(name or ""):
            raise ValueError(f"bad action type name: {name!r}")
        if kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind: {kind!r}")
        self._kinds[name] = kind

    def kind_of(self, name: str) -> str | None:
        return self._kinds.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._kinds

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self._kinds))

    def custom_entries(self) -> dict[str, str]:
        """Registered non-builtin types, for persistence."""
        builtin = {READ_SCRIPT, SHOW_FILE, ASK_QUESTION}
        return {n: k for n, k in sorted(self._kinds.items()) if n not in builtin}


def _default_registry() -> ActionRegistry:
    return ActionRegistry.builtin()


@dataclass(frozen=True)
class TeachingAction:
    """One (type, value) unit of classroom behavior.

    ``value`` is text for text-kind actions, a 1-based page index for
    page-ref actions, or a tuple of question ids for id-set actions.
    ``attrs`` holds any extra key=value attributes from the markup.
    """

    action_type: str
    value: str | int | tuple[str, ...] = ""
    attrs: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not _NAME_RE.match(self.action_type or ""):
            raise ValueError(f"bad action type: {self.action_type!r}")
        object.__setattr__(self, "attrs", dict(self.attrs))
        for k, v in self.attrs.items():
            if not _ATTR_KEY_RE.match(k):
                raise ValueError(f"bad attribute key: {k!r}")
            if not _ATTR_VALUE_RE.match(v):
                raise ValueError(f"bad attribute value for {k!r}: {v!r}")
        v = self.value
        if self.action_type == READ_SCRIPT:
            if not isinstance(v, str) or v == "":
                raise ValueError("ReadScript requires non-empty text")
        elif isinstance(v, bool):
            raise ValueError("action value may not be a bool")
        elif isinstance(v, int):
            if v < 1:
                raise ValueError(f"page index must be >= 1, got {v}")
            if PAGE_ATTR in self.attrs:
                raise ValueError("page attribute is the value channel for page-ref actions")
        elif isinstance(v, tuple):
            if not v:
                raise ValueError(f"{self.action_type} requires at least one id")
            for qid in v:
                if not isinstance(qid, str) or not _ID_RE.match(qid):
                    raise ValueError(f"bad id in {self.action_type}: {qid!r}")
            if IDS_ATTR in self.attrs:
                raise ValueError("q attribute is the value channel for id-set actions")
        elif isinstance(v, str):
            if self.action_type == SHOW_FILE:
                raise ValueError("ShowFile requires a page index value")
            if self.action_type == ASK_QUESTION:
                raise ValueError("AskQuestion requires a tuple of question ids")
        else:
            raise ValueError(f"unsupported value type: {type(v).__name__}")

    def summary(self) -> dict:
        """Compact JSON-friendly descriptor (transcript/action field)."""
        val: object = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"type": self.action_type, "value": val}


@dataclass(frozen=True)
class ScriptDocument:
    """Ordered sequence of teaching actions; position is the c-index."""

    items: tuple[TeachingAction, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def source_page_map(self) -> dict[int, int]:
        """Item index -> slide page, derived from the items themselves.

        An explicit ``page`` attribute wins; a ShowFile's value sets the
        page for itself and carries forward; items before any page
        context are absent from the map.
        """
        out: dict[int, int] = {}
        current: int | None = None
        for i, item in enumerate(self.items):
            page = None
            raw = item.attrs.get(PAGE_ATTR)
            if raw is not None:
                try:
                    page = int(raw)
                except ValueError:
                    page = None
            if page is None and isinstance(item.value, int):
                page = item.value
            if page is not None:
                current = page
            if current is not None:
                out[i] = current
        return out


def _unescape_char(text: str, i: int) -> tuple[str, int] | None:
    """If an escape sequence starts at i, return (literal, chars consumed)."""
    if text[i] == "\\" and i + 1 < len(text) and text[i + 1] in (OPEN, CLOSE, "\\"):
        return text[i + 1], 2
    return None


def _parse_header(header: str, line: int) -> tuple[str, dict[str, str]]:
    tokens = header.split()
    if not tokens:
        raise ScriptParseError("MalformedMarker", line, "empty marker header")
    name = tokens[0]
    if not _NAME_RE.match(name):
        raise ScriptParseError("MalformedMarker", line, f"bad action type name {name!r}")
    attrs: dict[str, str] = {}
    for tok in tokens[1:]:
        key, sep, value = tok.partition("=")
        if not sep or not _ATTR_KEY_RE.match(key) or not _ATTR_VALUE_RE.match(value):
            raise ScriptParseError("MalformedMarker", line, f"bad attribute token {tok!r}")
        if key in attrs:
            raise ScriptParseError("MalformedMarker", line, f"duplicate attribute {key!r}")
        attrs[key] = value
    return name, attrs


def _action_from_block(
    name: str, attrs: dict[str, str], payload: str, registry: ActionRegistry, line: int
) -> TeachingAction:
    kind = registry.kind_of(name)
    if kind == KIND_TEXT:
        if payload == "":
            raise ScriptParseError("EmptyPayload", line, f"{name} requires a text payload")
        return TeachingAction(name, payload, attrs)
    if kind == KIND_PAGE_REF:
        if payload != "":
            raise ScriptParseError("MalformedMarker", line, f"{name} takes no payload text")
        raw = attrs.pop(PAGE_ATTR, None)
        if raw is None:
            raise ScriptParseError("EmptyPayload", line, f"{name} requires a page attribute")
        try:
            page = int(raw)
        except ValueError:
            raise ScriptParseError("MalformedMarker", line, f"page is not an integer: {raw!r}")
        if page < 1:
            raise ScriptParseError("MalformedMarker", line, f"page index must be >= 1: {page}")
        return TeachingAction(name, page, attrs)
    if kind == KIND_ID_SET:
        if payload != "":
            raise ScriptParseError("MalformedMarker", line, f"{name} takes no payload text")
        raw = attrs.pop(IDS_ATTR, None)
        if raw is None or raw == "":
            raise ScriptParseError("EmptyPayload", line, f"{name} requires a q attribute")
        ids = tuple(raw.split(","))
        for qid in ids:
            if not _ID_RE.match(qid):
                raise ScriptParseError("MalformedMarker", line, f"bad question id {qid!r}")
        return TeachingAction(name, ids, attrs)
    # Unregistered type: keep the raw payload; validation reports UnknownType.
    return TeachingAction(name, payload, attrs)


def parse_script(text: str, registry: ActionRegistry | None = None) -> ScriptDocument:
    """Parse marked-up script text into a ScriptDocument.

    Total over arbitrary text: returns a document or raises a located
    :class:`ScriptParseError`; prose outside blocks folds into
    ReadScript items (whitespace-only prose is dropped).
    """
    registry = registry or _default_registry()
    items: list[TeachingAction] = []
    prose: list[str] = []
    i = 0
    line = 1
    n = len(text)

    def flush_prose() -> None:
        joined = "".join(prose).strip()
        prose.clear()
        if joined:
            items.append(TeachingAction(READ_SCRIPT, joined))

    while i < n:
        esc = _unescape_char(text, i)
        if esc is not None:
            prose.append(esc[0])
            i += esc[1]
            continue
        ch = text[i]
        if ch != OPEN:
            prose.append(ch)
            if ch == "\n":
                line += 1
            i += 1
            continue
        if text.startswith(END_BLOCK, i):
            raise ScriptParseError("MalformedMarker", line, "close marker without an open block")
        flush_prose()
        open_line = line
        # Header: everything up to the next ⟧ on the same line.
        j = i + 1
        while j < n and text[j] not in (CLOSE, OPEN, "\n"):
            j += 1
        if j >= n or text[j] != CLOSE:
            raise ScriptParseError("MalformedMarker", open_line, "marker header not closed")
        name, attrs = _parse_header(text[i + 1:j], open_line)
        # Payload: escaped text until the ⟦/⟧ end marker.
        j += 1
        payload: list[str] = []
        closed = False
        while j < n:
            esc = _unescape_char(text, j)
            if esc is not None:
                payload.append(esc[0])
                j += esc[1]
                continue
            if text.startswith(END_BLOCK, j):
                j += len(END_BLOCK)
                closed = True
                break
            if text[j] == OPEN:
                raise ScriptParseError(
                    "MalformedMarker", line, f"unescaped marker inside {name} payload"
                )
            if text[j] == "\n":
                line += 1
            payload.append(text[j])
            j += 1
        if not closed:
            raise ScriptParseError("MalformedMarker", open_line, f"unclosed {name} block")
        items.append(_action_from_block(name, attrs, "".join(payload), registry, open_line))
        i = j
    flush_prose()
    return ScriptDocument(tuple(items))


def _escape(text: str) -> str:
    return (
        text.replace("\\", "\\\\").replace(OPEN, "\\" + OPEN).replace(CLOSE, "\\" + CLOSE)
    )


def _infer_kind(action: TeachingAction, registry: ActionRegistry) -> str:
    kind = registry.kind_of(action.action_type)
    if kind is not None:
        return kind
    if isinstance(action.value, int):
        return KIND_PAGE_REF
    if isinstance(action.value, tuple):
        return KIND_ID_SET
    return KIND_TEXT


def _intrinsic_issues(doc: ScriptDocument, registry: ActionRegistry) -> list[Issue]:
    issues: list[Issue] = []
    for i, item in enumerate(doc.items):
        kind = registry.kind_of(item.action_type)
        if kind is None:
            continue
        ok = (
            (kind == KIND_TEXT and isinstance(item.value, str) and item.value != "")
            or (kind == KIND_PAGE_REF and isinstance(item.value, int))
            or (kind == KIND_ID_SET and isinstance(item.value, tuple))
        )
        if not ok:
            issues.append(
                Issue(str(i), "KindMismatch",
                      f"{item.action_type} value does not match {kind} kind")
            )
    return issues


def serialize_script(doc: ScriptDocument, registry: ActionRegistry | None = None) -> str:
    """Render a document to canonical markup.

    One marker block per action, newline-separated, attributes sorted by
    key. Raises :class:`InvalidDocument` when an item's value does not
    match its registered payload kind.
    """
    registry = registry or _default_registry()
    issues = _intrinsic_issues(doc, registry)
    if issues:
        raise InvalidDocument(issues)
    blocks: list[str] = []
    for item in doc.items:
        kind = _infer_kind(item, registry)
        attrs = dict(item.attrs)
        payload = ""
        if kind == KIND_TEXT:
            payload = _escape(str(item.value))
        elif kind == KIND_PAGE_REF:
            attrs[PAGE_ATTR] = str(item.value)
        else:
            attrs[IDS_ATTR] = ",".join(item.value)  # type: ignore[arg-type]
        attr_str = "".join(f" {k}={v}" for k, v in sorted(attrs.items()))
        blocks.append(f"{OPEN}{item.action_type}{attr_str}{CLOSE}{payload}{END_BLOCK}")
    return "\n".join(blocks)


def validate_script(
    doc: ScriptDocument, registry: ActionRegistry | None = None, pkg=None
) -> ValidationReport:
    """Check a document against the registry and an owning package.

    ``pkg`` is any object exposing ``pages`` (items with ``index``) and
    ``questions`` (items with ``id``); pass None to skip reference checks.
    """
    registry = registry or _default_registry()
    page_indices = {p.index for p in pkg.pages} if pkg is not None else None
    question_ids = {q.id for q in pkg.questions} if pkg is not None else None
    errors: list[Issue] = list(_intrinsic_issues(doc, registry))
    warnings: list[Issue] = []
    for i, item in enumerate(doc.items):
        ref = str(i)
        if item.action_type not in registry:
            errors.append(Issue(ref, "UnknownType", f"unregistered action type {item.action_type!r}"))
        if page_indices is not None:
            if isinstance(item.value, int) and item.value not in page_indices:
                errors.append(Issue(ref, "DanglingPageRef", f"page {item.value} does not exist"))
            raw = item.attrs.get(PAGE_ATTR)
            if raw is not None:
                try:
                    attr_page = int(raw)
                except ValueError:
                    errors.append(Issue(ref, "InvalidAttr", f"page attribute not an integer: {raw!r}"))
                else:
                    if attr_page not in page_indices:
                        errors.append(Issue(ref, "DanglingPageRef", f"page {attr_page} does not exist"))
        if question_ids is not None and isinstance(item.value, tuple):
            for qid in item.value:
                if qid not in question_ids:
                    errors.append(Issue(ref, "DanglingQuestionRef", f"question {qid!r} not in bank"))
    return ValidationReport(tuple(errors), tuple(warnings))
