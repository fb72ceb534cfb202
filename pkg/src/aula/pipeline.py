"""Course preparation: compile a slide deck into a lecture package.

Two stages. Read: per-page content extraction (text + visual) and
sequential page descriptions with a sliding context window, then the
knowledge taxonomy. Plan: lecture script generation, per-page question
generation with AskQuestion insertions, and agent construction with
material ingestion. Every generated artifact starts as a draft and goes
through instructor review (``apply_review``) before the package becomes
publishable.

Provider outputs that fail structural validation get exactly one
automatic repair round, then the stage fails loudly; cost stays bounded
and bad generations surface to the instructor instead of looping.

All requests are built by pure functions, so tests can precompute
fingerprints and pin fixtures. Ablation flags ``no_visual`` and
``no_context`` are part of the request content (they change
fingerprints) to support generation-quality comparisons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

from .agents import preset_assistant, preset_classmates, preset_teacher
from .errors import AulaError
from .package import (
    KnowledgeNode,
    LecturePackage,
    PageDescription,
    QuestionItem,
    ReviewState,
    SlidePage,
    STATUS_APPROVED,
    STATUS_DRAFT,
    UnknownItem,
    make_image_ref,
    validate_package,
)
from .providers import ProviderGateway, ProviderRequest, chat_request, vision_request
from .rag import RagStore
from .script import (
    ASK_QUESTION,
    READ_SCRIPT,
    SHOW_FILE,
    ScriptDocument,
    ScriptParseError,
    TeachingAction,
    parse_script,
    serialize_script,
    validate_script,
)
from .templates import render_template

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

STAGES = ("read", "plan", "review", "done")


class UndecodableImage(AulaError):
    pass


class MalformedTaxonomy(AulaError):
    pass


class MalformedScript(AulaError):
    pass


class MalformedQuestions(AulaError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    context_window: int = 2
    no_visual: bool = False
    no_context: bool = False
    questions_per_page: int = 1

    @property
    def effective_window(self) -> int:
        return 0 if self.no_context else self.context_window


@dataclass(frozen=True)
class InstructorInput:
    """Personalization supplied by the instructor before compilation."""

    persona_notes: str = ""
    extended_materials: tuple[tuple[str, str], ...] = ()
    voice_config: dict | None = None
    rag_enabled: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "extended_materials", tuple(self.extended_materials))
        if self.extended_materials and not self.rag_enabled:
            raise ValueError("extended materials require rag_enabled")


@dataclass
class PipelineRun:
    deck_id: str
    stage: str = "read"
    page_progress: dict[int, str] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)

    def advance(self, stage: str) -> None:
        if STAGES.index(stage) < STAGES.index(self.stage):
            raise ValueError(f"stage can only advance ({self.stage} -> {stage})")
        self.stage = stage


# -- request builders (pure; fingerprints are computable ahead of time) --

def build_extract_request(deck_id: str, page_index: int, image: bytes,
                          cfg: PipelineConfig) -> ProviderRequest:
    context = {
        "deck_id": deck_id,
        "page_index": page_index,
        "include_visual": not cfg.no_visual,
    }
    return vision_request(render_template("extract"), context, image, task="extract")


def build_describe_request(deck_id: str, page: SlidePage,
                           previous: list[tuple[int, str]],
                           cfg: PipelineConfig) -> ProviderRequest:
    window = cfg.effective_window
    context = {
        "deck_id": deck_id,
        "page_index": page.index,
        "text_content": page.text_content,
        "visual_content": "" if cfg.no_visual else page.visual_content,
        "include_visual": not cfg.no_visual,
        "context_window": window,
        "previous": [
            {"page_index": idx, "description": desc}
            for idx, desc in previous[-window:] if window > 0
        ],
    }
    return chat_request(render_template("describe"), context, task="describe")


def _pages_context(deck_id: str, pages: tuple[SlidePage, ...],
                   descriptions: tuple[PageDescription, ...]) -> dict:
    by_index = {d.page_index: d.description for d in descriptions}
    return {
        "deck_id": deck_id,
        "pages": [
            {"index": p.index, "description": by_index.get(p.index, "")}
            for p in sorted(pages, key=lambda p: p.index)
        ],
    }


def build_taxonomy_request(deck_id: str, pages: tuple[SlidePage, ...],
                           descriptions: tuple[PageDescription, ...]) -> ProviderRequest:
    return chat_request(render_template("taxonomy"),
                        _pages_context(deck_id, pages, descriptions), task="taxonomy")


def build_script_request(deck_id: str, pages: tuple[SlidePage, ...],
                         descriptions: tuple[PageDescription, ...]) -> ProviderRequest:
    return chat_request(render_template("script"),
                        _pages_context(deck_id, pages, descriptions), task="script",
                        max_tokens=4096)


def build_questions_request(deck_id: str, page_index: int, description: str,
                            count: int) -> ProviderRequest:
    context = {
        "deck_id": deck_id,
        "page_index": page_index,
        "description": description,
        "count": count,
    }
    return chat_request(render_template("questions"), context, task="questions")


def build_repair_request(task: str, previous_output: str, problems: list[str],
                         context: dict) -> ProviderRequest:
    repair_context = {
        "task": task,
        "previous_output": previous_output,
        "problems": problems,
        "context": context,
    }
    return chat_request(render_template("repair"), repair_context,
                        task=f"{task}_repair", max_tokens=4096)


class PreparationPipeline:
    """Runs the Read and Plan stages against a provider gateway."""

    def __init__(self, gateway: ProviderGateway, config: PipelineConfig | None = None,
                 on_event: Callable[[dict], None] | None = None) -> None:
        self.gateway = gateway
        self.config = config or PipelineConfig()
        self.on_event = on_event
        self._event_seq = 0

    def _event(self, stage: str, detail: dict) -> None:
        if self.on_event is None:
            return
        self._event_seq += 1
        self.on_event({
            "seq": self._event_seq,
            "kind": "phase_change",
            "payload": {"stage": stage, **detail},
        })

    # -- read stage ------------------------------------------------------

    def extract_page_content(self, deck_id: str, page_index: int,
                             image: bytes) -> tuple[str, str]:
        if not image.startswith(PNG_MAGIC):
            raise UndecodableImage(f"page {page_index} is not a PNG image")
        request = build_extract_request(deck_id, page_index, image, self.config)
        reply = self.gateway.describe_image(request).text
        text, visual = "", ""
        try:
            obj = json.loads(reply)
            text = str(obj.get("text", ""))
            visual = str(obj.get("visual", ""))
        except ValueError:
            text = reply.strip()
        if self.config.no_visual:
            visual = ""
        return text, visual

    def describe_page(self, deck_id: str, page: SlidePage,
                      previous: list[tuple[int, str]]) -> PageDescription:
        request = build_describe_request(deck_id, page, previous, self.config)
        reply = self.gateway.complete_chat(request).text
        return PageDescription(page.index, reply.strip(), STATUS_DRAFT)

    # -- taxonomy --------------------------------------------------------

    @staticmethod
    def _parse_nodes(reply: str) -> tuple[list[KnowledgeNode], list[str]]:
        problems: list[str] = []
        nodes: list[KnowledgeNode] = []
        try:
            raw = json.loads(reply)
        except ValueError as exc:
            return [], [f"not valid JSON: {exc}"]
        if not isinstance(raw, list):
            return [], ["expected a JSON array of nodes"]
        for i, entry in enumerate(raw):
            if not isinstance(entry, dict):
                problems.append(f"node {i} is not an object")
                continue
            parent = entry.get("parent")
            try:
                nodes.append(KnowledgeNode(
                    str(entry["id"]), str(entry.get("label", "")),
                    None if parent is None else str(parent),
                    tuple(int(r) for r in entry.get("page_refs", [])),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                problems.append(f"node {i} is malformed: {exc}")
        return nodes, problems

    @staticmethod
    def tree_problems(nodes: list[KnowledgeNode], page_indices: set[int]) -> list[str]:
        """Brute-force checkable tree requirements for a taxonomy."""
        problems: list[str] = []
        if not nodes:
            return ["taxonomy is empty"]
        by_id: dict[str, KnowledgeNode] = {}
        for node in nodes:
            if node.id in by_id:
                problems.append(f"duplicate node id {node.id!r}")
            by_id[node.id] = node
        roots = [n for n in nodes if n.parent is None]
        if len(roots) != 1:
            problems.append(f"expected exactly one root, found {len(roots)}")
        children: dict[str, list[str]] = {}
        for node in nodes:
            if node.parent is not None:
                if node.parent not in by_id:
                    problems.append(f"node {node.id!r} has missing parent {node.parent!r}")
                else:
                    children.setdefault(node.parent, []).append(node.id)
        if len(roots) == 1:
            reached = set()
            stack = [roots[0].id]
            while stack:
                nid = stack.pop()
                if nid in reached:
                    continue
                reached.add(nid)
                stack.extend(children.get(nid, []))
            unreachable = sorted(set(by_id) - reached)
            if unreachable:
                problems.append(f"nodes unreachable from root: {unreachable}")
        referenced = {r for n in nodes for r in n.page_refs}
        bad_refs = sorted(referenced - page_indices)
        if bad_refs:
            problems.append(f"page refs to nonexistent pages: {bad_refs}")
        missing = sorted(page_indices - referenced)
        if missing:
            problems.append(f"pages not referenced by any node: {missing}")
        return problems

    def extract_taxonomy(self, deck_id: str, pages: tuple[SlidePage, ...],
                         descriptions: tuple[PageDescription, ...]) -> tuple[KnowledgeNode, ...]:
        page_indices = {p.index for p in pages}
        request = build_taxonomy_request(deck_id, pages, descriptions)
        reply = self.gateway.complete_chat(request).text
        nodes, problems = self._parse_nodes(reply)
        problems += self.tree_problems(nodes, page_indices)
        if problems:
            repair = build_repair_request(
                "taxonomy", reply, problems, _pages_context(deck_id, pages, descriptions))
            reply = self.gateway.complete_chat(repair).text
            nodes, problems = self._parse_nodes(reply)
            problems += self.tree_problems(nodes, page_indices)
            if problems:
                raise MalformedTaxonomy("; ".join(problems))
        return tuple(nodes)

    # -- script ----------------------------------------------------------

    @staticmethod
    def script_problems(doc: ScriptDocument, pkg: LecturePackage) -> list[str]:
        problems: list[str] = []
        report = validate_script(doc, pkg.registry(), pkg)
        problems.extend(f"{i.code} at item {i.ref}: {i.message}" for i in report.errors)
        expected = [p.index for p in sorted(pkg.pages, key=lambda p: p.index)]
        shows = [item.value for item in doc.items if item.action_type == SHOW_FILE]
        if shows != expected:
            problems.append(f"page transitions {shows} do not match page order {expected}")
        reads_by_page: dict[int, int] = {}
        current: int | None = None
        for item in doc.items:
            if item.action_type == SHOW_FILE and isinstance(item.value, int):
                current = item.value
            elif item.action_type == READ_SCRIPT:
                if current is None:
                    problems.append("narration before the first page transition")
                    current = -1
                elif current > 0:
                    reads_by_page[current] = reads_by_page.get(current, 0) + 1
        for index in expected:
            if reads_by_page.get(index, 0) < 1:
                problems.append(f"page {index} has no narration")
        return problems

    def generate_script(self, pkg: LecturePackage) -> ScriptDocument:
        request = build_script_request(pkg.deck_id, pkg.pages, pkg.descriptions)
        reply = self.gateway.complete_chat(request).text

        def attempt(text: str) -> tuple[ScriptDocument | None, list[str]]:
            try:
                doc = parse_script(text, pkg.registry())
            except ScriptParseError as exc:
                return None, [str(exc)]
            return doc, self.script_problems(doc, pkg)

        doc, problems = attempt(reply)
        if problems:
            repair = build_repair_request(
                "script", reply, problems,
                _pages_context(pkg.deck_id, pkg.pages, pkg.descriptions))
            reply = self.gateway.complete_chat(repair).text
            doc, problems = attempt(reply)
            if problems or doc is None:
                raise MalformedScript("; ".join(problems))
        assert doc is not None
        return doc

    # -- questions -------------------------------------------------------

    @staticmethod
    def _parse_questions(reply: str, count: int) -> tuple[list[tuple[str, str]], list[str]]:
        try:
            raw = json.loads(reply)
        except ValueError as exc:
            return [], [f"not valid JSON: {exc}"]
        if not isinstance(raw, list):
            return [], ["expected a JSON array"]
        out: list[tuple[str, str]] = []
        problems: list[str] = []
        for i, entry in enumerate(raw):
            if not isinstance(entry, dict) or not str(entry.get("stem", "")).strip():
                problems.append(f"question {i} is malformed")
                continue
            out.append((str(entry["stem"]), str(entry.get("answer", ""))))
        if len(out) != count:
            problems.append(f"expected {count} questions, got {len(out)}")
        return out, problems

    def generate_questions(self, pkg: LecturePackage) -> LecturePackage:
        """Draft per-page questions and insert AskQuestion actions."""
        count = self.config.questions_per_page
        if count < 1:
            return pkg
        questions: list[QuestionItem] = []
        ids_by_page: dict[int, list[str]] = {}
        for page in sorted(pkg.pages, key=lambda p: p.index):
            desc = pkg.description_for(page.index)
            request = build_questions_request(
                pkg.deck_id, page.index, desc.description if desc else "", count)
            reply = self.gateway.complete_chat(request).text
            pairs, problems = self._parse_questions(reply, count)
            if problems:
                repair = build_repair_request(
                    "questions", reply, problems,
                    {"page_index": page.index, "count": count})
                reply = self.gateway.complete_chat(repair).text
                pairs, problems = self._parse_questions(reply, count)
                if problems:
                    raise MalformedQuestions(
                        f"page {page.index}: " + "; ".join(problems))
            for n, (stem, answer) in enumerate(pairs, start=1):
                qid = f"q{page.index}-{n}"
                questions.append(QuestionItem(qid, page.index, stem, answer, STATUS_DRAFT))
                ids_by_page.setdefault(page.index, []).append(qid)
        script = insert_question_actions(pkg.script, ids_by_page)
        return replace(pkg, questions=tuple(questions), script=script)

    # -- agents ----------------------------------------------------------

    def build_agents(self, pkg: LecturePackage,
                     inputs: InstructorInput) -> LecturePackage:
        teacher = preset_teacher(pkg.deck_id, inputs.persona_notes)
        assistant = preset_assistant(pkg.deck_id)
        classmates = preset_classmates(pkg.deck_id)
        store = pkg.rag_store
        if inputs.extended_materials:
            store = store or RagStore()
            doc_ids = []
            for doc_id, text in inputs.extended_materials:
                store.ingest_material(doc_id, text, agents=("teacher", "assistant"))
                doc_ids.append(doc_id)
            teacher = teacher.with_bindings(tuple(doc_ids))
            assistant = assistant.with_bindings(tuple(doc_ids))
        return replace(pkg, agents=(teacher, assistant) + classmates, rag_store=store)

    # -- whole run -------------------------------------------------------

    def prepare(self, deck_id: str, page_images: list[tuple[int, bytes]],
                inputs: InstructorInput | None = None) -> tuple[LecturePackage, PipelineRun]:
        """Compile a deck (list of (page index, png bytes)) into a draft package."""
        inputs = inputs or InstructorInput()
        run = PipelineRun(deck_id)
        ordered = sorted(page_images, key=lambda pair: pair[0])

        pages: list[SlidePage] = []
        images: dict[int, bytes] = {}
        for index, image in ordered:
            try:
                text, visual = self.extract_page_content(deck_id, index, image)
            except AulaError as exc:
                run.errors.append(f"extract page {index}: {exc}")
                raise
            pages.append(SlidePage(index, make_image_ref(image), text, visual))
            images[index] = image
            run.page_progress[index] = "extracted"
            self._event("read", {"page": index, "step": "extracted"})

        descriptions: list[PageDescription] = []
        prior: list[tuple[int, str]] = []
        for page in pages:
            desc = self.describe_page(deck_id, page, prior)
            descriptions.append(desc)
            prior.append((page.index, desc.description))
            run.page_progress[page.index] = "described"
            self._event("read", {"page": page.index, "step": "described"})

        taxonomy = self.extract_taxonomy(deck_id, tuple(pages), tuple(descriptions))
        self._event("read", {"step": "taxonomy", "nodes": len(taxonomy)})

        run.advance("plan")
        pkg = LecturePackage(
            deck_id=deck_id,
            pages=tuple(pages),
            descriptions=tuple(descriptions),
            taxonomy=taxonomy,
            page_images=images,
        )
        pkg = replace(pkg, script=self.generate_script(pkg))
        self._event("plan", {"step": "script", "items": len(pkg.script)})
        pkg = self.generate_questions(pkg)
        self._event("plan", {"step": "questions", "count": len(pkg.questions)})
        pkg = self.build_agents(pkg, inputs)
        self._event("plan", {"step": "agents", "count": len(pkg.agents)})

        run.advance("review")
        return pkg, run


def insert_question_actions(script: ScriptDocument,
                            ids_by_page: dict[int, list[str]]) -> ScriptDocument:
    """Insert one AskQuestion per page after that page's last narration."""
    if not ids_by_page:
        return script
    page_map = script.source_page_map
    last_read: dict[int, int] = {}
    for i, item in enumerate(script.items):
        page = page_map.get(i)
        if page is not None and item.action_type == READ_SCRIPT:
            last_read[page] = i
    items: list[TeachingAction] = []
    for i, item in enumerate(script.items):
        items.append(item)
        page = page_map.get(i)
        if page is not None and last_read.get(page) == i and page in ids_by_page:
            items.append(TeachingAction(ASK_QUESTION, tuple(ids_by_page[page])))
    return ScriptDocument(tuple(items))


def apply_review(pkg: LecturePackage, item_ref: str, decision: str,
                 content=None, note: str = "") -> LecturePackage:
    """Instructor review of one generated artifact.

    ``item_ref`` is ``description:<page>``, ``question:<id>`` or one of
    the whole-artifact keys ``script`` / ``taxonomy`` / ``agents``.
    ``approve`` marks it approved; ``edit`` replaces the content and
    approves; ``reject`` reverts to draft with a note.
    """
    if decision not in ("approve", "edit", "reject"):
        raise ValueError(f"unknown review decision: {decision!r}")
    if decision == "edit" and content is None:
        raise ValueError("edit needs replacement content")

    def new_status() -> str:
        return STATUS_DRAFT if decision == "reject" else STATUS_APPROVED

    kind, _, key = item_ref.partition(":")
    if kind == "description":
        try:
            page = int(key)
        except ValueError:
            raise UnknownItem(item_ref)
        found = False
        out = []
        for desc in pkg.descriptions:
            if desc.page_index == page:
                found = True
                text = str(content) if decision == "edit" else desc.description
                out.append(replace(desc, description=text, status=new_status(), note=note))
            else:
                out.append(desc)
        if not found:
            raise UnknownItem(item_ref)
        return replace(pkg, descriptions=tuple(out))
    if kind == "question":
        found = False
        out_q = []
        for q in pkg.questions:
            if q.id == key:
                found = True
                stem, answer = q.stem, q.reference_answer
                if decision == "edit":
                    if isinstance(content, dict):
                        stem = str(content.get("stem", stem))
                        answer = str(content.get("reference_answer", answer))
                    else:
                        stem = str(content)
                out_q.append(replace(q, stem=stem, reference_answer=answer,
                                     status=new_status(), note=note))
            else:
                out_q.append(q)
        if not found:
            raise UnknownItem(item_ref)
        return replace(pkg, questions=tuple(out_q))
    if item_ref in ("script", "taxonomy", "agents"):
        reviews = dict(pkg.reviews)
        reviews[item_ref] = ReviewState(new_status(), note)
        updated = replace(pkg, reviews=reviews)
        if decision == "edit":
            if item_ref == "script":
                updated = replace(updated, script=parse_script(str(content), pkg.registry()))
            elif item_ref == "taxonomy":
                updated = replace(updated, taxonomy=tuple(content))
            else:
                updated = replace(updated, agents=tuple(content))
        return updated
    raise UnknownItem(item_ref)


def publish_ready(pkg: LecturePackage) -> bool:
    return validate_package(pkg).publishable
