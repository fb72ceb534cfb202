"""The lecture package: the persistent course resource.

A package bundles everything one deck compiles into: slide pages with
extracted content, per-page descriptions, the knowledge taxonomy, the
lecture script, the question bank and the agent roster. It persists as
a single zip archive:

    manifest              JSON, sorted keys, format tag ``lecture-pkg/1``
    pages/page-<n>.png    one image per slide page
    rag/chunks.json       chunk manifest (when materials were ingested)
    rag/vectors.f32       little-endian float32 embedding table

Saving is deterministic: identical logical content yields identical
bytes. Packages are immutable values after load; edits go through
``dataclasses.replace`` and produce new values.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, replace

from .agents import AgentProfile, KIND_TEACHER
from .errors import AulaError
from .rag import RagStore
from .script import (
    ActionRegistry,
    Issue,
    ScriptDocument,
    parse_script,
    serialize_script,
    validate_script,
)

FORMAT_VERSION = "lecture-pkg/1"

STATUS_DRAFT = "draft"
STATUS_APPROVED = "approved"

REVIEW_KEYS = ("script", "taxonomy", "agents")

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class UnsupportedVersion(AulaError):
    pass


class CorruptPackage(AulaError):
    def __init__(self, path: str, detail: str = ""):
        super().__init__(f"corrupt package at {path}" + (f": {detail}" if detail else ""))
        self.path = path


class UnknownItem(AulaError):
    pass


def make_image_ref(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class SlidePage:
    index: int
    image_ref: str
    text_content: str = ""
    visual_content: str = ""

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("page index is 1-based")


@dataclass(frozen=True)
class PageDescription:
    page_index: int
    description: str
    status: str = STATUS_DRAFT
    note: str = ""


@dataclass(frozen=True)
class KnowledgeNode:
    id: str
    label: str
    parent: str | None
    page_refs: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "page_refs", tuple(self.page_refs))


@dataclass(frozen=True)
class QuestionItem:
    id: str
    page_index: int
    stem: str
    reference_answer: str = ""
    status: str = STATUS_DRAFT
    note: str = ""


@dataclass(frozen=True)
class ReviewState:
    status: str = STATUS_DRAFT
    note: str = ""


def _default_reviews() -> dict[str, ReviewState]:
    return {key: ReviewState() for key in REVIEW_KEYS}


@dataclass(frozen=True)
class LecturePackage:
    deck_id: str
    pages: tuple[SlidePage, ...] = ()
    descriptions: tuple[PageDescription, ...] = ()
    taxonomy: tuple[KnowledgeNode, ...] = ()
    script: ScriptDocument = field(default_factory=ScriptDocument)
    questions: tuple[QuestionItem, ...] = ()
    agents: tuple[AgentProfile, ...] = ()
    version: str = FORMAT_VERSION
    page_images: dict[int, bytes] = field(default_factory=dict)
    reviews: dict[str, ReviewState] = field(default_factory=_default_reviews)
    custom_actions: dict[str, str] = field(default_factory=dict)
    rag_store: RagStore | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "pages", tuple(self.pages))
        object.__setattr__(self, "descriptions", tuple(self.descriptions))
        object.__setattr__(self, "taxonomy", tuple(self.taxonomy))
        object.__setattr__(self, "questions", tuple(self.questions))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "page_images", dict(self.page_images))
        reviews = dict(_default_reviews())
        reviews.update(self.reviews)
        object.__setattr__(self, "reviews", reviews)
        object.__setattr__(self, "custom_actions", dict(self.custom_actions))

    def page_by_index(self, index: int) -> SlidePage | None:
        for page in self.pages:
            if page.index == index:
                return page
        return None

    def description_for(self, index: int) -> PageDescription | None:
        for desc in self.descriptions:
            if desc.page_index == index:
                return desc
        return None

    def question_by_id(self, qid: str) -> QuestionItem | None:
        for q in self.questions:
            if q.id == qid:
                return q
        return None

    def agent_by_id(self, agent_id: str) -> AgentProfile | None:
        for a in self.agents:
            if a.id == agent_id:
                return a
        return None

    def registry(self) -> ActionRegistry:
        reg = ActionRegistry.builtin()
        for name, kind in sorted(self.custom_actions.items()):
            reg.register(name, kind)
        return reg


@dataclass(frozen=True)
class PackageValidationReport:
    errors: tuple[Issue, ...] = ()
    warnings: tuple[Issue, ...] = ()
    publishable: bool = False

    @property
    def valid(self) -> bool:
        return not self.errors


def _manifest_dict(pkg: LecturePackage) -> dict:
    return {
        "format": pkg.version,
        "deck_id": pkg.deck_id,
        "pages": [
            {
                "index": p.index,
                "image_ref": p.image_ref,
                "text_content": p.text_content,
                "visual_content": p.visual_content,
            }
            for p in pkg.pages
        ],
        "descriptions": [
            {
                "page_index": d.page_index,
                "description": d.description,
                "status": d.status,
                "note": d.note,
            }
            for d in pkg.descriptions
        ],
        "taxonomy": [
            {
                "id": n.id,
                "label": n.label,
                "parent": n.parent,
                "page_refs": list(n.page_refs),
            }
            for n in pkg.taxonomy
        ],
        "script": serialize_script(pkg.script, pkg.registry()),
        "questions": [
            {
                "id": q.id,
                "page_index": q.page_index,
                "stem": q.stem,
                "reference_answer": q.reference_answer,
                "status": q.status,
                "note": q.note,
            }
            for q in pkg.questions
        ],
        "agents": [
            {
                "id": a.id,
                "display_name": a.display_name,
                "kind": a.kind,
                "roles": sorted(a.roles),
                "system_prompt": a.system_prompt,
                "rag_bindings": list(a.rag_bindings),
                "customization": a.customization,
            }
            for a in pkg.agents
        ],
        "reviews": {
            key: {"status": state.status, "note": state.note}
            for key, state in sorted(pkg.reviews.items())
        },
        "custom_actions": dict(sorted(pkg.custom_actions.items())),
    }


def save_package(pkg: LecturePackage) -> bytes:
    """Serialize a package to deterministic archive bytes."""
    manifest = json.dumps(_manifest_dict(pkg), sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(zf, "manifest", manifest.encode("utf-8"))
        for page in sorted(pkg.pages, key=lambda p: p.index):
            data = pkg.page_images.get(page.index, b"")
            _write_entry(zf, f"pages/page-{page.index}.png", data)
        if pkg.rag_store is not None:
            _write_entry(zf, "rag/chunks.json", pkg.rag_store.manifest_bytes())
            _write_entry(zf, "rag/vectors.f32", pkg.rag_store.vectors_bytes())
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _require(obj: dict, key: str, kind: type, path: str):
    if key not in obj:
        raise CorruptPackage(f"{path}.{key}", "missing field")
    value = obj[key]
    if kind is not type(None) and not isinstance(value, kind):
        raise CorruptPackage(f"{path}.{key}", f"expected {kind.__name__}")
    return value


def load_package(data: bytes) -> LecturePackage:
    """Materialize a package from archive bytes (validation not implied)."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise CorruptPackage("zip", str(exc))
    names = set(zf.namelist())
    if "manifest" not in names:
        raise CorruptPackage("manifest", "missing archive entry")
    try:
        manifest = json.loads(zf.read("manifest").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptPackage("manifest", f"not valid JSON: {exc}")
    if not isinstance(manifest, dict):
        raise CorruptPackage("manifest", "not an object")

    version = _require(manifest, "format", str, "manifest")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported package format: {version!r}")

    deck_id = _require(manifest, "deck_id", str, "manifest")
    custom_actions = {
        str(k): str(v) for k, v in _require(manifest, "custom_actions", dict, "manifest").items()
    }
    registry = ActionRegistry.builtin()
    for name, kind in sorted(custom_actions.items()):
        try:
            registry.register(name, kind)
        except ValueError as exc:
            raise CorruptPackage(f"manifest.custom_actions.{name}", str(exc))

    pages = []
    page_images: dict[int, bytes] = {}
    for i, entry in enumerate(_require(manifest, "pages", list, "manifest")):
        path = f"manifest.pages[{i}]"
        if not isinstance(entry, dict):
            raise CorruptPackage(path, "expected object")
        try:
            page = SlidePage(
                _require(entry, "index", int, path),
                _require(entry, "image_ref", str, path),
                _require(entry, "text_content", str, path),
                _require(entry, "visual_content", str, path),
            )
        except ValueError as exc:
            raise CorruptPackage(path, str(exc))
        entry_name = f"pages/page-{page.index}.png"
        if entry_name not in names:
            raise CorruptPackage(entry_name, "missing archive entry")
        pages.append(page)
        page_images[page.index] = zf.read(entry_name)

    descriptions = []
    for i, entry in enumerate(_require(manifest, "descriptions", list, "manifest")):
        path = f"manifest.descriptions[{i}]"
        descriptions.append(
            PageDescription(
                _require(entry, "page_index", int, path),
                _require(entry, "description", str, path),
                _require(entry, "status", str, path),
                _require(entry, "note", str, path),
            )
        )

    taxonomy = []
    for i, entry in enumerate(_require(manifest, "taxonomy", list, "manifest")):
        path = f"manifest.taxonomy[{i}]"
        parent = entry.get("parent")
        if parent is not None and not isinstance(parent, str):
            raise CorruptPackage(f"{path}.parent", "expected string or null")
        taxonomy.append(
            KnowledgeNode(
                _require(entry, "id", str, path),
                _require(entry, "label", str, path),
                parent,
                tuple(int(r) for r in _require(entry, "page_refs", list, path)),
            )
        )

    script_text = _require(manifest, "script", str, "manifest")
    try:
        script = parse_script(script_text, registry)
    except AulaError as exc:
        raise CorruptPackage("manifest.script", str(exc))

    questions = []
    for i, entry in enumerate(_require(manifest, "questions", list, "manifest")):
        path = f"manifest.questions[{i}]"
        questions.append(
            QuestionItem(
                _require(entry, "id", str, path),
                _require(entry, "page_index", int, path),
                _require(entry, "stem", str, path),
                _require(entry, "reference_answer", str, path),
                _require(entry, "status", str, path),
                _require(entry, "note", str, path),
            )
        )

    agents = []
    for i, entry in enumerate(_require(manifest, "agents", list, "manifest")):
        path = f"manifest.agents[{i}]"
        try:
            agents.append(
                AgentProfile(
                    _require(entry, "id", str, path),
                    _require(entry, "display_name", str, path),
                    _require(entry, "kind", str, path),
                    frozenset(_require(entry, "roles", list, path)),
                    _require(entry, "system_prompt", str, path),
                    tuple(_require(entry, "rag_bindings", list, path)),
                    _require(entry, "customization", str, path),
                )
            )
        except ValueError as exc:
            raise CorruptPackage(path, str(exc))

    reviews = {}
    for key, entry in _require(manifest, "reviews", dict, "manifest").items():
        path = f"manifest.reviews.{key}"
        if not isinstance(entry, dict):
            raise CorruptPackage(path, "expected object")
        reviews[str(key)] = ReviewState(
            _require(entry, "status", str, path), _require(entry, "note", str, path)
        )

    rag_store = None
    if "rag/chunks.json" in names:
        try:
            rag_store = RagStore.from_bytes(
                zf.read("rag/chunks.json"),
                zf.read("rag/vectors.f32") if "rag/vectors.f32" in names else b"",
            )
        except (ValueError, KeyError) as exc:
            raise CorruptPackage("rag/chunks.json", str(exc))

    return LecturePackage(
        deck_id=deck_id,
        pages=tuple(pages),
        descriptions=tuple(descriptions),
        taxonomy=tuple(taxonomy),
        script=script,
        questions=tuple(questions),
        agents=tuple(agents),
        version=version,
        page_images=page_images,
        reviews=reviews,
        custom_actions=custom_actions,
        rag_store=rag_store,
    )


def _taxonomy_issues(pkg: LecturePackage, page_indices: set[int]) -> tuple[list[Issue], list[Issue]]:
    errors: list[Issue] = []
    warnings: list[Issue] = []
    nodes = pkg.taxonomy
    if not nodes:
        warnings.append(Issue("taxonomy", "MissingTaxonomy", "package has no knowledge taxonomy"))
        return errors, warnings
    by_id: dict[str, KnowledgeNode] = {}
    for node in nodes:
        if node.id in by_id:
            errors.append(Issue(f"node:{node.id}", "DuplicateNodeId", "node id reused"))
        by_id[node.id] = node
        for ref in node.page_refs:
            if ref not in page_indices:
                errors.append(
                    Issue(f"node:{node.id}", "DanglingPageRef", f"page {ref} does not exist"))
    roots = [n for n in nodes if n.parent is None]
    if not roots:
        errors.append(Issue("taxonomy", "NoRoot", "no root node (parent=null)"))
    elif len(roots) > 1:
        errors.append(
            Issue("taxonomy", "MultipleRoots",
                  "several roots: " + ", ".join(sorted(n.id for n in roots))))
    for node in nodes:
        if node.parent is not None and node.parent not in by_id:
            errors.append(
                Issue(f"node:{node.id}", "DanglingParent", f"parent {node.parent!r} missing"))
    # Walk parent links; a node that never reaches a root sits on a cycle.
    for node in nodes:
        seen = {node.id}
        current = node
        while current.parent is not None:
            nxt = by_id.get(current.parent)
            if nxt is None:
                break
            if nxt.id in seen:
                errors.append(Issue(f"node:{node.id}", "TaxonomyCycle", "parent links form a cycle"))
                break
            seen.add(nxt.id)
            current = nxt
    return errors, warnings


def validate_package(pkg: LecturePackage,
                     registry: ActionRegistry | None = None) -> PackageValidationReport:
    """Check every package invariant; pure and order-insensitive.

    The report's ``publishable`` flag is true iff there are zero errors
    and every reviewable artifact is approved.
    """
    registry = registry or pkg.registry()
    errors: list[Issue] = []
    warnings: list[Issue] = []

    page_indices: set[int] = set()
    for page in pkg.pages:
        ref = f"page:{page.index}"
        if page.index in page_indices:
            errors.append(Issue(ref, "DuplicatePage", "page index reused"))
        page_indices.add(page.index)
        data = pkg.page_images.get(page.index)
        if data is None:
            errors.append(Issue(ref, "MissingImage", "no image bytes stored for page"))
        elif make_image_ref(data) != page.image_ref:
            errors.append(Issue(ref, "ImageRefMismatch", "image_ref does not match stored bytes"))

    described: set[int] = set()
    for desc in pkg.descriptions:
        ref = f"description:{desc.page_index}"
        if desc.page_index not in page_indices:
            errors.append(Issue(ref, "DanglingPageRef", "description for nonexistent page"))
        if desc.page_index in described:
            errors.append(Issue(ref, "DuplicateDescription", "page described twice"))
        described.add(desc.page_index)
        if desc.status == STATUS_APPROVED and not desc.description.strip():
            errors.append(Issue(ref, "EmptyApproved", "approved description is empty"))
        if desc.status == STATUS_DRAFT:
            warnings.append(Issue(ref, "DraftContent", "description awaiting review"))
    for index in page_indices - described:
        errors.append(Issue(f"page:{index}", "MissingDescription", "page has no description"))

    tax_errors, tax_warnings = _taxonomy_issues(pkg, page_indices)
    errors.extend(tax_errors)
    warnings.extend(tax_warnings)

    seen_q: set[str] = set()
    for q in pkg.questions:
        ref = f"question:{q.id}"
        if q.id in seen_q:
            errors.append(Issue(ref, "DuplicateQuestionId", "question id reused"))
        seen_q.add(q.id)
        if q.page_index not in page_indices:
            errors.append(Issue(ref, "DanglingPageRef", f"page {q.page_index} does not exist"))
        if q.status == STATUS_DRAFT:
            warnings.append(Issue(ref, "DraftContent", "question awaiting review"))

    script_report = validate_script(pkg.script, registry, pkg)
    errors.extend(Issue(f"script:{i.ref}", i.code, i.message) for i in script_report.errors)
    warnings.extend(Issue(f"script:{i.ref}", i.code, i.message) for i in script_report.warnings)

    seen_a: set[str] = set()
    teachers = 0
    for agent in pkg.agents:
        ref = f"agent:{agent.id}"
        if agent.id in seen_a:
            errors.append(Issue(ref, "DuplicateAgentId", "agent id reused"))
        seen_a.add(agent.id)
        if agent.kind == KIND_TEACHER:
            teachers += 1
        for doc_id in agent.rag_bindings:
            if pkg.rag_store is None or not any(
                c.source_doc == doc_id for c in pkg.rag_store.chunks
            ):
                errors.append(
                    Issue(ref, "DanglingMaterialRef", f"bound material {doc_id!r} not in store"))
    if pkg.agents:
        if teachers == 0:
            errors.append(Issue("agents", "NoTeacher", "no teacher profile in roster"))
        elif teachers > 1:
            errors.append(Issue("agents", "MultipleTeachers", "more than one teacher profile"))
    else:
        warnings.append(Issue("agents", "NoAgents", "package has no agent profiles"))

    drafts = False
    for key, state in sorted(pkg.reviews.items()):
        if state.status != STATUS_APPROVED:
            warnings.append(Issue(key, "DraftContent", f"{key} awaiting review"))
            drafts = True
    drafts = drafts or any(d.status == STATUS_DRAFT for d in pkg.descriptions)
    drafts = drafts or any(q.status == STATUS_DRAFT for q in pkg.questions)

    errors_sorted = tuple(sorted(set(errors), key=lambda i: (i.ref, i.code, i.message)))
    warnings_sorted = tuple(sorted(set(warnings), key=lambda i: (i.ref, i.code, i.message)))
    publishable = not errors_sorted and not drafts
    return PackageValidationReport(errors_sorted, warnings_sorted, publishable)


def approve_all(pkg: LecturePackage) -> LecturePackage:
    """Blanket instructor sign-off: mark every reviewable artifact approved."""
    return replace(
        pkg,
        descriptions=tuple(replace(d, status=STATUS_APPROVED) for d in pkg.descriptions),
        questions=tuple(replace(q, status=STATUS_APPROVED) for q in pkg.questions),
        reviews={key: ReviewState(STATUS_APPROVED, state.note)
                 for key, state in pkg.reviews.items()},
    )
