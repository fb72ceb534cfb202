"""Agent profiles: role-tagged personas for the classroom roster.

Class roles follow the four classroom behavior categories: teaching and
initiation (TI), in-depth discussion (ID), emotional companionship (EC)
and classroom management (CM).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .templates import render_template

ROLE_TI = "TI"
ROLE_ID = "ID"
ROLE_EC = "EC"
ROLE_CM = "CM"
CLASS_ROLES = frozenset({ROLE_TI, ROLE_ID, ROLE_EC, ROLE_CM})

KIND_TEACHER = "teacher"
KIND_ASSISTANT = "assistant"
KIND_CLASSMATE = "classmate"
KIND_USER = "user"
AGENT_KINDS = (KIND_TEACHER, KIND_ASSISTANT, KIND_CLASSMATE, KIND_USER)

USER_AGENT_ID = "user"


@dataclass(frozen=True)
class AgentProfile:
    id: str
    display_name: str
    kind: str
    roles: frozenset[str] = frozenset()
    system_prompt: str = ""
    rag_bindings: tuple[str, ...] = ()
    customization: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("agent id must be non-empty")
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind: {self.kind!r}")
        object.__setattr__(self, "roles", frozenset(self.roles))
        object.__setattr__(self, "rag_bindings", tuple(self.rag_bindings))
        bad = self.roles - CLASS_ROLES
        if bad:
            raise ValueError(f"unknown class roles: {sorted(bad)}")
        if self.kind != KIND_USER and not self.roles:
            raise ValueError("non-user agents need at least one class role")

    def with_bindings(self, doc_ids: tuple[str, ...]) -> "AgentProfile":
        return replace(self, rag_bindings=tuple(doc_ids))

    def role_description(self) -> str:
        """First paragraph of the system prompt; the manager's role blurb."""
        return self.system_prompt.split("\n\n", 1)[0].strip()


def user_profile() -> AgentProfile:
    return AgentProfile(USER_AGENT_ID, "You", KIND_USER)


# Preset classmate archetypes: (id, display name, roles, template).
_ARCHETYPES = (
    ("clown", "Class Clown", {ROLE_TI, ROLE_EC, ROLE_CM}, "agent_clown"),
    ("deep_thinker", "Deep Thinker", {ROLE_TI, ROLE_ID}, "agent_deep_thinker"),
    ("note_taker", "Note Taker", {ROLE_TI, ROLE_CM}, "agent_note_taker"),
    ("inquisitive", "Inquisitive Mind", {ROLE_TI, ROLE_EC}, "agent_inquisitive"),
)


def preset_classmates(deck_title: str = "") -> tuple[AgentProfile, ...]:
    """The four archetypal student agents."""
    out = []
    for agent_id, name, roles, template in _ARCHETYPES:
        prompt = render_template(template, display_name=name, deck_title=deck_title)
        out.append(AgentProfile(agent_id, name, KIND_CLASSMATE, frozenset(roles), prompt))
    return tuple(out)


def preset_teacher(deck_title: str = "", persona_notes: str = "") -> AgentProfile:
    prompt = render_template("agent_teacher", deck_title=deck_title, persona_notes=persona_notes)
    return AgentProfile(
        "teacher", "Teacher", KIND_TEACHER,
        frozenset({ROLE_TI, ROLE_ID}), prompt, customization=persona_notes,
    )


def preset_assistant(deck_title: str = "") -> AgentProfile:
    prompt = render_template("agent_assistant", deck_title=deck_title)
    return AgentProfile(
        "assistant", "Teaching Assistant", KIND_ASSISTANT,
        frozenset({ROLE_CM, ROLE_EC}), prompt,
    )
