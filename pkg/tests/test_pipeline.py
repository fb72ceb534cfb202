"""Compilation tests: read/plan stages, repair rounds, review workflow."""

from __future__ import annotations

import json

import pytest

from aula.offline import install_offline_handlers, offline_gateway, script_handler
from aula.package import (
    STATUS_APPROVED,
    STATUS_DRAFT,
    UnknownItem,
    save_package,
    validate_package,
)
from aula.pipeline import (
    InstructorInput,
    MalformedQuestions,
    MalformedScript,
    MalformedTaxonomy,
    PipelineConfig,
    PipelineRun,
    PreparationPipeline,
    UndecodableImage,
    apply_review,
    build_describe_request,
    build_extract_request,
    build_taxonomy_request,
)
from aula.providers import MockProvider, ProviderGateway
from aula.script import ASK_QUESTION, READ_SCRIPT, SHOW_FILE
from conftest import make_package, make_png


def make_pipeline(config: PipelineConfig | None = None):
    return PreparationPipeline(offline_gateway(), config or PipelineConfig())


def deck(n: int) -> list[tuple[int, bytes]]:
    return [(i, make_png(i)) for i in range(1, n + 1)]


# -- read stage ---------------------------------------------------------------

def test_extract_blank_slide_fixture():
    mock = install_offline_handlers(MockProvider())
    gw = ProviderGateway(mock, sleep=lambda _s: None)
    pipe = PreparationPipeline(gw)
    req = build_extract_request("d", 1, make_png(1), pipe.config)
    mock.register_fixture(req.fingerprint, json.dumps({"text": "", "visual": ""}))
    assert pipe.extract_page_content("d", 1, make_png(1)) == ("", "")


def test_extract_title_slide_fixture():
    mock = install_offline_handlers(MockProvider())
    gw = ProviderGateway(mock, sleep=lambda _s: None)
    pipe = PreparationPipeline(gw)
    req = build_extract_request("d", 1, make_png(1), pipe.config)
    mock.register_fixture(req.fingerprint, json.dumps(
        {"text": "Towards AGI: Lecture 1", "visual": "large title text centered"}))
    assert pipe.extract_page_content("d", 1, make_png(1)) == (
        "Towards AGI: Lecture 1", "large title text centered")


def test_extract_rejects_non_png():
    with pytest.raises(UndecodableImage):
        make_pipeline().extract_page_content("d", 1, b"not a png")


def test_five_page_deck_preserves_order():
    pkg, _ = make_pipeline().prepare("d", deck(5))
    assert [p.index for p in pkg.pages] == [1, 2, 3, 4, 5]
    assert len(pkg.descriptions) == 5
    assert [d.page_index for d in pkg.descriptions] == [1, 2, 3, 4, 5]


def test_descriptions_start_as_drafts():
    pkg, _ = make_pipeline().prepare("d", deck(2))
    assert all(d.status == STATUS_DRAFT for d in pkg.descriptions)


def test_context_window_changes_fingerprint():
    pkg = make_package(n_pages=3)
    page = pkg.pages[2]
    previous = [(1, "About page 1"), (2, "About page 2")]
    with_context = build_describe_request("d", page, previous, PipelineConfig(context_window=2))
    without = build_describe_request("d", page, previous, PipelineConfig(no_context=True))
    assert with_context.fingerprint != without.fingerprint


def test_no_visual_changes_fingerprints():
    cfg_on = PipelineConfig()
    cfg_off = PipelineConfig(no_visual=True)
    extract_on = build_extract_request("d", 1, make_png(1), cfg_on)
    extract_off = build_extract_request("d", 1, make_png(1), cfg_off)
    assert extract_on.fingerprint != extract_off.fingerprint
    page = make_package(1).pages[0]
    assert build_describe_request("d", page, [], cfg_on).fingerprint != \
        build_describe_request("d", page, [], cfg_off).fingerprint


# -- taxonomy -----------------------------------------------------------------

def test_minimal_single_node_taxonomy_accepted():
    mock = install_offline_handlers(MockProvider())
    gw = ProviderGateway(mock, sleep=lambda _s: None)
    pipe = PreparationPipeline(gw)
    pkg = make_package(n_pages=1)
    req = build_taxonomy_request("d", pkg.pages, pkg.descriptions)
    mock.register_fixture(req.fingerprint, json.dumps(
        [{"id": "root", "label": "Everything", "parent": None, "page_refs": [1]}]))
    nodes = pipe.extract_taxonomy("d", pkg.pages, pkg.descriptions)
    assert len(nodes) == 1
    assert nodes[0].parent is None
    assert nodes[0].page_refs == (1,)


def test_cyclic_taxonomy_gets_one_repair_then_fails():
    calls = {"taxonomy": 0, "taxonomy_repair": 0}
    cyclic = json.dumps([
        {"id": "a", "label": "A", "parent": "b", "page_refs": [1]},
        {"id": "b", "label": "B", "parent": "a", "page_refs": []},
    ])

    def bad(req):
        task = req.metadata["task"]
        calls[task] += 1
        return cyclic

    mock = MockProvider()
    mock.register_handler("taxonomy", bad)
    mock.register_handler("taxonomy_repair", bad)
    pipe = PreparationPipeline(ProviderGateway(mock, sleep=lambda _s: None))
    pkg = make_package(n_pages=1)
    with pytest.raises(MalformedTaxonomy):
        pipe.extract_taxonomy("d", pkg.pages, pkg.descriptions)
    assert calls == {"taxonomy": 1, "taxonomy_repair": 1}


def test_repair_round_can_rescue_taxonomy():
    replies = iter(["not json at all"])

    def flaky(req):
        return next(replies)

    mock = install_offline_handlers(MockProvider())
    mock.register_handler("taxonomy", flaky)
    pipe = PreparationPipeline(ProviderGateway(mock, sleep=lambda _s: None))
    pkg = make_package(n_pages=2)
    nodes = pipe.extract_taxonomy("d", pkg.pages, pkg.descriptions)
    assert PreparationPipeline.tree_problems(list(nodes), {1, 2}) == []


def test_three_page_deck_yields_root_plus_leaves():
    pkg, _ = make_pipeline().prepare("d", deck(3))
    assert len(pkg.taxonomy) == 4
    roots = [n for n in pkg.taxonomy if n.parent is None]
    assert len(roots) == 1
    assert PreparationPipeline.tree_problems(list(pkg.taxonomy), {1, 2, 3}) == []


# -- script -------------------------------------------------------------------

def test_script_structure_for_two_pages():
    pkg, _ = make_pipeline(PipelineConfig(questions_per_page=0)).prepare("d", deck(2))
    kinds = [(a.action_type, a.value if a.action_type == SHOW_FILE else None)
             for a in pkg.script.items]
    assert kinds[0] == (SHOW_FILE, 1)
    assert kinds[1][0] == READ_SCRIPT
    assert kinds[2] == (SHOW_FILE, 2)
    assert kinds[3][0] == READ_SCRIPT


def test_generated_script_validates_against_package():
    from aula.script import validate_script
    pkg, _ = make_pipeline().prepare("d", deck(4))
    assert validate_script(pkg.script, pkg.registry(), pkg).valid


def test_source_page_map_is_monotone_over_mock_decks():
    for pages in (1, 2, 5, 8):
        pkg, _ = make_pipeline().prepare("d", deck(pages))
        mapped = [pkg.script.source_page_map[i] for i in sorted(pkg.script.source_page_map)]
        assert mapped == sorted(mapped)


def test_bad_script_gets_one_repair_then_fails():
    calls = {"script": 0, "script_repair": 0}

    def bad(req):
        calls[req.metadata["task"]] += 1
        return "no markup here"

    mock = install_offline_handlers(MockProvider())
    mock.register_handler("script", bad)
    mock.register_handler("script_repair", bad)
    pipe = PreparationPipeline(ProviderGateway(mock, sleep=lambda _s: None))
    with pytest.raises(MalformedScript):
        pipe.prepare("d", deck(2))
    assert calls == {"script": 1, "script_repair": 1}


def test_script_repair_can_rescue():
    sent = {"bad": False}

    def flaky(req):
        if not sent["bad"]:
            sent["bad"] = True
            return "still prose, no page transitions"
        return script_handler(req)

    mock = install_offline_handlers(MockProvider())
    mock.register_handler("script", flaky)
    # repair handler regenerates from embedded context
    pipe = PreparationPipeline(ProviderGateway(mock, sleep=lambda _s: None))
    pkg, _ = pipe.prepare("d", deck(2))
    assert [a.value for a in pkg.script.items if a.action_type == SHOW_FILE] == [1, 2]


# -- questions ----------------------------------------------------------------

def test_zero_questions_leaves_script_unchanged():
    pkg, _ = make_pipeline(PipelineConfig(questions_per_page=0)).prepare("d", deck(3))
    assert pkg.questions == ()
    assert all(a.action_type != ASK_QUESTION for a in pkg.script.items)


def test_one_question_per_page_on_three_pages():
    pkg, _ = make_pipeline(PipelineConfig(questions_per_page=1)).prepare("d", deck(3))
    assert len(pkg.questions) == 3
    asks = [a for a in pkg.script.items if a.action_type == ASK_QUESTION]
    assert len(asks) == 3


def test_inserted_question_ids_resolve():
    pkg, _ = make_pipeline(PipelineConfig(questions_per_page=2)).prepare("d", deck(3))
    bank = {q.id for q in pkg.questions}
    for action in pkg.script.items:
        if action.action_type == ASK_QUESTION:
            for qid in action.value:
                assert qid in bank


def test_ask_question_placed_after_last_narration_of_page():
    pkg, _ = make_pipeline().prepare("d", deck(2))
    page_map = pkg.script.source_page_map
    for i, action in enumerate(pkg.script.items):
        if action.action_type == ASK_QUESTION:
            page = page_map[i]
            later_reads = [
                j for j, other in enumerate(pkg.script.items)
                if j > i and other.action_type == READ_SCRIPT and page_map.get(j) == page
            ]
            assert later_reads == []


def test_wrong_question_count_fails_after_repair():
    def two_not_three(req):
        return json.dumps([{"stem": "a?", "answer": ""}, {"stem": "b?", "answer": ""}])

    mock = install_offline_handlers(MockProvider())
    mock.register_handler("questions", two_not_three)
    mock.register_handler("questions_repair", two_not_three)
    pipe = PreparationPipeline(ProviderGateway(mock, sleep=lambda _s: None),
                               PipelineConfig(questions_per_page=3))
    with pytest.raises(MalformedQuestions):
        pipe.prepare("d", deck(1))


# -- agents -------------------------------------------------------------------

def test_default_roster_is_six_profiles():
    pkg, _ = make_pipeline().prepare("d", deck(1))
    kinds = sorted(a.kind for a in pkg.agents)
    assert len(pkg.agents) == 6
    assert kinds == ["assistant", "classmate", "classmate", "classmate", "classmate", "teacher"]
    names = {a.display_name for a in pkg.agents if a.kind == "classmate"}
    assert names == {"Class Clown", "Deep Thinker", "Note Taker", "Inquisitive Mind"}


def test_persona_notes_verbatim_in_teacher_prompt():
    notes = "Always socratic; pause after definitions."
    pkg, _ = make_pipeline().prepare("d", deck(1), InstructorInput(persona_notes=notes))
    teacher = next(a for a in pkg.agents if a.kind == "teacher")
    assert notes in teacher.system_prompt


def test_materials_are_chunked_and_bound():
    inputs = InstructorInput(extended_materials=(("syllabus", "agents " * 400),))
    pkg, _ = make_pipeline().prepare("d", deck(1), inputs)
    assert pkg.rag_store is not None and len(pkg.rag_store) >= 1
    teacher = next(a for a in pkg.agents if a.kind == "teacher")
    assistant = next(a for a in pkg.agents if a.kind == "assistant")
    assert teacher.rag_bindings == ("syllabus",)
    assert assistant.rag_bindings == ("syllabus",)
    assert all("teacher" in c.agents and "assistant" in c.agents
               for c in pkg.rag_store.chunks)


def test_materials_require_rag_enabled():
    with pytest.raises(ValueError):
        InstructorInput(extended_materials=(("x", "y"),), rag_enabled=False)


# -- review workflow ----------------------------------------------------------

def test_approve_everything_makes_publishable():
    pkg, _ = make_pipeline().prepare("d", deck(2))
    assert not validate_package(pkg).publishable
    for desc in pkg.descriptions:
        pkg = apply_review(pkg, f"description:{desc.page_index}", "approve")
    for q in pkg.questions:
        pkg = apply_review(pkg, f"question:{q.id}", "approve")
    for key in ("script", "taxonomy", "agents"):
        pkg = apply_review(pkg, key, "approve")
    assert validate_package(pkg).publishable


def test_edit_description_replaces_and_approves():
    pkg, _ = make_pipeline().prepare("d", deck(1))
    pkg = apply_review(pkg, "description:1", "edit", content="A better take.")
    desc = pkg.description_for(1)
    assert desc.description == "A better take."
    assert desc.status == STATUS_APPROVED


def test_reject_question_blocks_publishing():
    pkg, _ = make_pipeline().prepare("d", deck(1))
    qid = pkg.questions[0].id
    pkg = apply_review(pkg, f"question:{qid}", "reject", note="too vague")
    question = pkg.question_by_id(qid)
    assert question.status == STATUS_DRAFT
    assert question.note == "too vague"
    assert not validate_package(pkg).publishable


def test_unknown_item_ref():
    pkg, _ = make_pipeline().prepare("d", deck(1))
    with pytest.raises(UnknownItem):
        apply_review(pkg, "description:42", "approve")
    with pytest.raises(UnknownItem):
        apply_review(pkg, "nonsense", "approve")


def test_stage_monotonicity():
    run = PipelineRun("d")
    run.advance("plan")
    run.advance("review")
    with pytest.raises(ValueError):
        run.advance("read")


def test_read_outputs_frozen_through_plan():
    pipe = make_pipeline()
    pkg, _ = pipe.prepare("d", deck(3))
    gw2 = offline_gateway()
    pipe2 = PreparationPipeline(gw2)
    text, visual = pipe2.extract_page_content("d", 1, make_png(1))
    page = pkg.page_by_index(1)
    assert (page.text_content, page.visual_content) == (text, visual)


def test_full_run_is_deterministic():
    one, _ = make_pipeline().prepare("d", deck(3))
    two, _ = make_pipeline().prepare("d", deck(3))
    assert save_package(one) == save_package(two)


def test_progress_events_are_emitted_in_stream_shape():
    events = []
    pipe = PreparationPipeline(offline_gateway(), on_event=events.append)
    pipe.prepare("d", deck(2))
    assert events
    assert [e["seq"] for e in events] == list(range(1, len(events) + 1))
    assert all(e["kind"] == "phase_change" for e in events)
    stages = [e["payload"]["stage"] for e in events]
    assert stages == sorted(stages, key=("read", "plan").index)
