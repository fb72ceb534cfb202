"""Shared fixtures: deck images, ready-made packages, offline gateways."""

from __future__ import annotations

import pytest

from aula.agents import preset_assistant, preset_classmates, preset_teacher
from aula.offline import offline_gateway
from aula.package import (
    KnowledgeNode,
    LecturePackage,
    PageDescription,
    QuestionItem,
    ReviewState,
    SlidePage,
    STATUS_APPROVED,
    make_image_ref,
)
from aula.script import ScriptDocument, TeachingAction

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def make_png(tag: int) -> bytes:
    """Minimal deterministic PNG-magic bytes for one fixture page."""
    return PNG_MAGIC + b"IHDR" + bytes([tag % 256]) * 16


def make_package(n_pages: int = 3, questions_per_page: int = 1,
                 approved: bool = True, deck_id: str = "fixture-deck",
                 script_items: tuple[TeachingAction, ...] | None = None) -> LecturePackage:
    """A consistent package built by hand (no pipeline involved)."""
    status = STATUS_APPROVED if approved else "draft"
    images = {i: make_png(i) for i in range(1, n_pages + 1)}
    pages = tuple(
        SlidePage(i, make_image_ref(images[i]), f"Text of page {i}", f"Visual of page {i}")
        for i in range(1, n_pages + 1)
    )
    descriptions = tuple(
        PageDescription(i, f"Page {i} explains topic {i}.", status)
        for i in range(1, n_pages + 1)
    )
    taxonomy = (KnowledgeNode("root", deck_id, None, ()),) + tuple(
        KnowledgeNode(f"k{i}", f"Concept {i}", "root", (i,))
        for i in range(1, n_pages + 1)
    )
    questions = tuple(
        QuestionItem(f"q{i}-{n}", i, f"Question {n} on page {i}?", f"Answer {n}.{i}", status)
        for i in range(1, n_pages + 1)
        for n in range(1, questions_per_page + 1)
    )
    if script_items is None:
        items: list[TeachingAction] = []
        for i in range(1, n_pages + 1):
            items.append(TeachingAction("ShowFile", i))
            items.append(TeachingAction("ReadScript", f"Narration for page {i}."))
            if questions_per_page:
                items.append(TeachingAction(
                    "AskQuestion",
                    tuple(f"q{i}-{n}" for n in range(1, questions_per_page + 1))))
        script_items = tuple(items)
    agents = (preset_teacher(deck_id), preset_assistant(deck_id)) + preset_classmates(deck_id)
    reviews = {k: ReviewState(status) for k in ("script", "taxonomy", "agents")}
    return LecturePackage(
        deck_id=deck_id,
        pages=pages,
        descriptions=descriptions,
        taxonomy=taxonomy,
        script=ScriptDocument(script_items),
        questions=questions,
        agents=agents,
        page_images=images,
        reviews=reviews,
    )


@pytest.fixture
def gateway():
    """Gateway backed by the fully scripted offline mock."""
    return offline_gateway()


@pytest.fixture
def package():
    return make_package()


@pytest.fixture
def draft_package():
    return make_package(approved=False)
