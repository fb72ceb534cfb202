"""Prompt template loading.

All provider-facing prompts live in versioned text files under
``aula/templates/`` so they can be edited without code changes. The
first line of each file is ``version: <n>``; the rest is the template
body with ``$name`` placeholders (string.Template substitution, so JSON
braces in prompt bodies need no escaping).
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

from .errors import AulaError


class TemplateError(AulaError):
    pass


@lru_cache(maxsize=None)
def load_template(name: str) -> tuple[int, str]:
    """Return (version, body) for templates/<name>.txt."""
    try:
        raw = resources.files("aula").joinpath("templates").joinpath(f"{name}.txt").read_text("utf-8")
    except FileNotFoundError:
        raise TemplateError(f"no such template: {name}")
    first, _, body = raw.partition("\n")
    if not first.startswith("version:"):
        raise TemplateError(f"template {name} is missing a version header")
    try:
        version = int(first.split(":", 1)[1].strip())
    except ValueError:
        raise TemplateError(f"template {name} has a bad version header: {first!r}")
    return version, body


def render_template(name: str, **fields: str) -> str:
    _, body = load_template(name)
    try:
        return Template(body).substitute(**fields).strip()
    except KeyError as exc:
        raise TemplateError(f"template {name} is missing field {exc.args[0]!r}")
