"""Deterministic offline behaviors for the mock provider.

Installs one handler per task label the system issues. Each handler is
a pure function of the request content (every request carries its
context as a canonical JSON user message), so full pipeline runs,
simulations and the service are byte-reproducible with no network.
"""

from __future__ import annotations

import hashlib
import json

from .analytics import keyword_classifier
from .providers import MockProvider, ProviderGateway, ProviderRequest
from .script import READ_SCRIPT, SHOW_FILE, ScriptDocument, TeachingAction, serialize_script


def _context(req: ProviderRequest) -> dict:
    if not req.messages:
        return {}
    try:
        obj = json.loads(req.messages[-1][1])
    except ValueError:
        return {}
    return obj if isinstance(obj, dict) else {}


def _image_tag(req: ProviderRequest) -> str:
    if req.image is None:
        return "noimage"
    return hashlib.sha256(req.image).hexdigest()[:8]


def extract_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    index = ctx.get("page_index", 0)
    tag = _image_tag(req)
    visual = ""
    if ctx.get("include_visual", True):
        visual = f"Figure layout of slide {index} ({tag})"
    return json.dumps({"text": f"Slide {index} heading and bullets ({tag})",
                       "visual": visual}, sort_keys=True)


def describe_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    index = ctx.get("page_index", 0)
    parts = [f"Page {index} covers: {ctx.get('text_content', '')}"]
    if ctx.get("visual_content"):
        parts.append(f"Shown on screen: {ctx['visual_content']}.")
    previous = ctx.get("previous") or []
    if previous:
        parts.append(f"It builds on the previous {len(previous)} page(s).")
    return " ".join(parts)


def taxonomy_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    deck = ctx.get("deck_id", "deck")
    nodes = [{"id": "root", "label": f"{deck} overview", "parent": None, "page_refs": []}]
    for page in ctx.get("pages", []):
        index = page.get("index")
        nodes.append({
            "id": f"k{index}",
            "label": f"Key ideas of page {index}",
            "parent": "root",
            "page_refs": [index],
        })
    return json.dumps(nodes, sort_keys=True)


def script_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    items: list[TeachingAction] = []
    for page in ctx.get("pages", []):
        index = int(page.get("index", 0))
        description = page.get("description") or f"Page {index}."
        items.append(TeachingAction(SHOW_FILE, index))
        items.append(TeachingAction(READ_SCRIPT, f"Let's look at page {index}. {description}"))
    return serialize_script(ScriptDocument(tuple(items)))


def questions_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    index = ctx.get("page_index", 0)
    description = str(ctx.get("description", ""))
    count = int(ctx.get("count", 1))
    out = []
    for n in range(1, count + 1):
        out.append({
            "stem": f"Question {n} on page {index}: what is the main takeaway?",
            "answer": f"From page {index}: {description[:80]}",
        })
    return json.dumps(out, sort_keys=True)


def manage_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    pending = ctx.get("pending_user_message")
    roster_ids = {entry.get("id") for entry in ctx.get("roster", [])}
    if pending:
        speaker = "assistant" if "assistant" in roster_ids else "teacher"
        decision = {
            "speaker": speaker,
            "action": {"kind": "speak",
                       "directive": f"Answer the student: {pending}"},
            "rationale": "a student message is pending",
        }
    else:
        decision = {
            "speaker": "teacher",
            "action": {"kind": "script"},
            "rationale": "no input pending; continue the lesson",
        }
    return json.dumps(decision, sort_keys=True)


def speak_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    speaker = (ctx.get("speaker") or {}).get("display_name", "Agent")
    directive = ctx.get("directive", "")
    return f"{speaker}: {directive}"


def classify_handler(req: ProviderRequest) -> str:
    ctx = _context(req)
    return keyword_classifier(str(ctx.get("text", "")))


def _repair_handler(req: ProviderRequest) -> str:
    """Regenerate from the original context embedded in the repair request."""
    ctx = _context(req)
    task = ctx.get("task", "")
    inner = ctx.get("context", {})
    fake = ProviderRequest(
        kind="chat", messages=(("user", json.dumps(inner, sort_keys=True)),),
        metadata={"task": task})
    if task == "taxonomy":
        return taxonomy_handler(fake)
    if task == "script":
        return script_handler(fake)
    if task == "questions":
        return questions_handler(fake)
    return ""


HANDLERS = {
    "extract": extract_handler,
    "describe": describe_handler,
    "taxonomy": taxonomy_handler,
    "script": script_handler,
    "questions": questions_handler,
    "manage": manage_handler,
    "speak": speak_handler,
    "classify": classify_handler,
    "taxonomy_repair": _repair_handler,
    "script_repair": _repair_handler,
    "questions_repair": _repair_handler,
}


def install_offline_handlers(mock: MockProvider) -> MockProvider:
    for task, handler in HANDLERS.items():
        mock.register_handler(task, handler)
    return mock


def offline_gateway() -> ProviderGateway:
    """A ready-to-use gateway backed by the fully scripted mock."""
    return ProviderGateway(install_offline_handlers(MockProvider()), sleep=lambda _s: None)
