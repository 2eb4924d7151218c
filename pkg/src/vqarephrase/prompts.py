"""Prompt template registry.

Templates are data: a JSON file maps (backend style, stage) to a template
with named slots, so supporting a new backend means editing data, not code.
The registry also carries the two fixed sentence-fusion exemplars.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .datamodel import CHOICE_LABELS

STYLES = ("completion", "chat")


class PromptError(Exception):
    """Missing template or unfilled slot."""


def choices_block(choices: list[str]) -> str:
    """Render 4 answer options as 'A. w, B. x, C. y, D. z'."""
    if len(choices) != len(CHOICE_LABELS):
        raise PromptError(f"expected {len(CHOICE_LABELS)} choices, got {len(choices)}")
    return ", ".join(f"{label}. {choice}" for label, choice in zip(CHOICE_LABELS, choices))


class PromptRegistry:
    def __init__(self, raw: dict, style: str = "completion"):
        if style not in raw.get("styles", {}):
            raise PromptError(f"style {style!r} not present in prompt registry")
        self.style = style
        self._templates: dict[str, str] = raw["styles"][style]
        self._exemplars: list[dict] = raw.get("fusion_exemplars", [])

    @classmethod
    def load(cls, path: str | Path | None = None, style: str = "completion") -> "PromptRegistry":
        if path is None:
            raw = json.loads(
                resources.files("vqarephrase.data").joinpath("prompts.json").read_text("utf-8")
            )
        else:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(raw, style=style)

    def has(self, stage: str) -> bool:
        return stage in self._templates

    def render(self, stage: str, **slots) -> str:
        try:
            template = self._templates[stage]
        except KeyError:
            raise PromptError(f"no template for stage {stage!r} in style {self.style!r}") from None
        try:
            return template.format(**slots)
        except (KeyError, IndexError) as exc:
            raise PromptError(f"template {stage!r} needs slot {exc}") from exc

    @property
    def fusion_exemplars(self) -> list[dict]:
        return list(self._exemplars)

    def exemplars_block(self) -> str:
        """The fusion exemplars rendered in the same shape as a live request."""
        blocks = []
        for ex in self._exemplars:
            blocks.append(
                "Question: {question}\nDetails:\n{entity}: {detail}\nModified Question: {modified}".format(**ex)
            )
        return "\n\n".join(blocks)
