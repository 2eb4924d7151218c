"""Visual-detail extraction: caption, rationale, per-entity details, and the
assembled details block that feeds sentence fusion."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .datamodel import ImageRef
from .keywords import extract_keywords
from .model_client import ModelClient, ModelError, SamplingParams, text_request
from .prompts import PromptRegistry

log = logging.getLogger(__name__)

_ENUM_MARKER = re.compile(r"(?:^|(?<=\s))(?:\d{1,2}[.)]|[A-Da-d][.)]|[-*•])\s*")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


class StageError(Exception):
    """Pipeline stage failure carrying the stage name."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass
class EntityDetail:
    name: str
    source: str  # "question" | "rationale"
    detail: str = ""


@dataclass
class VisualDetails:
    caption: str = ""
    entities: list[EntityDetail] = field(default_factory=list)
    rationale_text: str = ""


@dataclass
class ExtractConfig:
    max_question_entities: int = 3
    max_rationale_entities: int = 3
    max_entity_words: int = 5
    detail_max_sentences: int = 2
    use_question_entities: bool = True
    use_rationale: bool = True
    use_caption: bool = True


def truncate_sentences(text: str, limit: int) -> str:
    parts = _SENTENCE_SPLIT.split(text.strip())
    return " ".join(parts[:limit]).strip()


def parse_entity_list(response: str, cap: int, max_words: int = 5) -> list[str]:
    """Parse entity names from a model response.

    Splits on newlines/commas/semicolons/" and ", strips enumeration
    markers, lower-cases, and dedupes. A single prose sentence (no list
    structure, terminal period) counts as "no list detected".
    """
    text = response.strip()
    if not text:
        return []
    had_marker = bool(_ENUM_MARKER.search(text))
    segments = [s for s in re.split(r"[\n,;]+|\s+and\s+", text) if s.strip()]
    if not had_marker and len(segments) <= 1 and text.endswith((".", "!")):
        return []

    items: list[str] = []
    seen: set[str] = set()
    for segment in segments:
        for piece in _ENUM_MARKER.split(segment):
            name = piece.strip().strip(".:;,!?\"'()[]").strip().lower()
            name = re.sub(r"\s+", " ", name)
            if not name or len(name.split()) > max_words:
                continue
            if name in seen:
                continue
            seen.add(name)
            items.append(name)
            if len(items) >= cap:
                return items
    return items


def generate_caption(client: ModelClient,
                     prompts: PromptRegistry,
                     image: ImageRef,
                     max_new_tokens: int = 64,
                     seed: int | None = None) -> str:
    """Prompt the model for an image caption; empty output is a stage error."""
    prompt = prompts.render("caption")
    request = text_request(prompt, image=image,
                           sampling=SamplingParams(max_new_tokens=max_new_tokens),
                           stop_markers=["\n\n"], seed=seed, purpose="caption")
    try:
        response = client.generate(request)
    except ModelError as exc:
        raise StageError("caption", str(exc)) from exc
    caption = response.samples[0].text.strip()
    if not caption:
        raise StageError("caption", "empty caption")
    return caption


def generate_rationale_and_entities(client: ModelClient,
                                    prompts: PromptRegistry,
                                    image: ImageRef,
                                    question: str,
                                    caption: str = "",
                                    cap: int = 3,
                                    max_entity_words: int = 5,
                                    seed: int | None = None) -> tuple[str, list[str]]:
    """Two-step rationale extraction: sample an explanation, then ask which
    entities it relies on. An unparseable entity response degrades to an
    empty list with a warning."""
    rationale_prompt = prompts.render("rationale", question=question)
    rationale_req = text_request(
        rationale_prompt, image=image,
        sampling=SamplingParams(mode="beam", beams=5, temperature=0.7, max_new_tokens=64),
        stop_markers=["\n\n"], seed=seed, purpose="rationale")
    try:
        rationale = client.generate(rationale_req).samples[0].text.strip()
    except ModelError as exc:
        raise StageError("rationale", str(exc)) from exc

    entity_prompt = prompts.render("rationale_entities", rationale=rationale,
                                   question=question, caption=caption)
    entity_req = text_request(entity_prompt, image=image,
                              sampling=SamplingParams(max_new_tokens=48),
                              seed=seed, purpose="rationale_entities")
    try:
        raw = client.generate(entity_req).samples[0].text
    except ModelError as exc:
        raise StageError("rationale", str(exc)) from exc

    entities = parse_entity_list(raw, cap=cap, max_words=max_entity_words)
    if raw.strip() and not entities:
        log.warning("no entity list detected in rationale response: %.80r", raw)
    return rationale, entities


def query_entity_details(client: ModelClient,
                         prompts: PromptRegistry,
                         image: ImageRef,
                         entity: str,
                         seed: int | None = None) -> str:
    if not entity.strip():
        raise ValueError("entity must be non-empty")
    prompt = prompts.render("entity_details", entity=entity)
    request = text_request(prompt, image=image,
                           sampling=SamplingParams(max_new_tokens=48),
                           stop_markers=["\n\n"], seed=seed, purpose="entity_details")
    return client.generate(request).samples[0].text.strip()


def collect_visual_details(client: ModelClient,
                           prompts: PromptRegistry,
                           image: ImageRef,
                           question: str,
                           cfg: ExtractConfig | None = None,
                           stoplist: frozenset[str] | None = None,
                           seed: int | None = None) -> VisualDetails:
    """Run the extraction stage for one instance.

    Ablation flags on the config each remove exactly their contribution:
    question entities, the rationale (and its entities), or the caption.
    Entities are ordered question-first and deduped case-insensitively.
    A failed detail query skips that entity with a warning.
    """
    cfg = cfg or ExtractConfig()

    question_entities: list[str] = []
    if cfg.use_question_entities:
        keywords = extract_keywords(question, stoplist)
        question_entities = keywords.top_phrases(cfg.max_question_entities)

    caption = ""
    if cfg.use_caption:
        caption = generate_caption(client, prompts, image, seed=seed)

    rationale_text = ""
    rationale_entities: list[str] = []
    if cfg.use_rationale:
        rationale_text, rationale_entities = generate_rationale_and_entities(
            client, prompts, image, question, caption=caption,
            cap=cfg.max_rationale_entities, max_entity_words=cfg.max_entity_words,
            seed=seed)

    ordered: list[EntityDetail] = []
    seen: set[str] = set()
    for name, source in (
        [(n, "question") for n in question_entities]
        + [(n, "rationale") for n in rationale_entities]
    ):
        key = name.lower()
        if key in seen:
            continue
        seen.add(key)
        ordered.append(EntityDetail(name=name, source=source))

    kept: list[EntityDetail] = []
    for entity in ordered:
        try:
            detail = query_entity_details(client, prompts, image, entity.name, seed=seed)
        except ModelError as exc:
            log.warning("entity %r skipped: %s", entity.name, exc)
            continue
        entity.detail = truncate_sentences(detail, cfg.detail_max_sentences)
        kept.append(entity)

    return VisualDetails(caption=caption, entities=kept, rationale_text=rationale_text)


def assemble_details_block(details: VisualDetails) -> str:
    """One '<entity>: <detail>' line per entity, then 'image: <caption>'."""
    lines: list[str] = []
    seen: set[str] = set()
    for entity in details.entities:
        key = entity.name.lower()
        if key in seen:
            continue
        seen.add(key)
        lines.append(f"{entity.name}: {entity.detail}")
    if details.caption:
        lines.append(f"image: {details.caption}")
    return "\n".join(lines)
