"""Simple (SP) and complex (CP) prompt templates and prompt assembly."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cache
from importlib import resources

PLACEHOLDER = "{{NOTE}}"
TEMPLATE_VERSION = "1"
_FILES = {"SP": "sp.txt", "CP": "cp.txt"}


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str

    def __post_init__(self) -> None:
        if self.body.count(PLACEHOLDER) != 1:
            raise PromptError(f"template {self.id} must contain {PLACEHOLDER} exactly once")


@cache
def load_template(template_id: str) -> PromptTemplate:
    try:
        name = _FILES[template_id]
    except KeyError:
        raise PromptError(f"unknown prompt id {template_id!r}; expected one of {sorted(_FILES)}") from None
    body = resources.files("hivscreen.prompts").joinpath("templates", name).read_text(encoding="utf-8")
    return PromptTemplate(template_id, body)


def build_prompt(template: PromptTemplate | str, note: str) -> str:
    """Substitute ``note`` into the template's placeholder.

    Raises:
        PromptError: if the note is empty or itself contains the placeholder.
    """
    if isinstance(template, str):
        template = load_template(template)
    if not note:
        raise PromptError("note must be non-empty")
    if PLACEHOLDER in note:
        raise PromptError("note contains the template placeholder")
    head, tail = template.body.split(PLACEHOLDER)
    return head + note + tail


__all__ = ["PLACEHOLDER", "PromptError", "PromptTemplate", "build_prompt", "load_template"]
