"""Answer normalization, soft VQA accuracy, MC accuracy, and aggregation."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .datamodel import CHOICE_LABELS, QuestionInstance

log = logging.getLogger(__name__)

_ARTICLES = frozenset({"a", "an", "the"})
_PUNCT_RE = re.compile(r"[^\w\s]|_")

ANSWER_TYPE_BUCKETS = ("yes/no", "number", "other")


@lru_cache(maxsize=1)
def _number_words() -> dict[str, str]:
    raw = resources.files("vqarephrase.data").joinpath("number_words.json").read_text("utf-8")
    return json.loads(raw)


def normalize_answer(raw: str) -> str:
    """Lower-case, strip punctuation, drop articles, map number words to digits.

    Idempotent; anything outside those rules passes through unchanged.
    """
    text = _PUNCT_RE.sub("", raw.lower())
    numbers = _number_words()
    tokens = [numbers.get(tok, tok) for tok in text.split() if tok not in _ARTICLES]
    return " ".join(tokens)


def vqa_soft_accuracy(prediction: str, gold: list[str], official_averaging: bool = False) -> float:
    """Soft VQA accuracy of a predicted answer against annotator answers.

    Default is min(#matching annotators / 3, 1). With official_averaging the
    score is averaged over all leave-one-annotator-out subsets, matching the
    reference evaluator's behavior.
    """
    if not gold:
        raise ValueError("gold answer list must be non-empty")
    pred = normalize_answer(prediction)
    matches = [normalize_answer(g) == pred for g in gold]
    if not official_averaging:
        return min(sum(matches) / 3.0, 1.0)
    total = sum(matches)
    subset_scores = [min((total - int(m)) / 3.0, 1.0) for m in matches]
    return sum(subset_scores) / len(subset_scores)


def mc_accuracy(chosen_label: str, correct_choice_idx: int) -> float:
    """1.0 iff the chosen label (A-D) points at the annotated choice."""
    label = chosen_label.strip().upper()
    if label not in CHOICE_LABELS:
        raise ValueError(f"invalid choice label {chosen_label!r}")
    return 1.0 if CHOICE_LABELS.index(label) == correct_choice_idx else 0.0


def instance_utility(answer: str | None, instance: QuestionInstance, official_averaging: bool = False) -> float:
    """Per-instance evaluation score of an answer; errored answers score 0."""
    if answer is None or not answer.strip():
        return 0.0
    if instance.task_mode == "multiple_choice":
        if instance.correct_choice_idx is None:
            return 0.0
        try:
            return mc_accuracy(answer, instance.correct_choice_idx)
        except ValueError:
            return 0.0
    if not instance.gold_answers:
        return 0.0
    return vqa_soft_accuracy(answer, instance.gold_answers, official_averaging)


@dataclass
class EvalReport:
    """Aggregate accuracy (percent) overall and per answer type."""

    overall: float
    by_type: dict[str, float] = field(default_factory=dict)
    per_instance: list[dict] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "by_type": dict(self.by_type),
            "per_instance": list(self.per_instance),
            "counts": dict(self.counts),
        }


def aggregate(results: list[tuple[str, float]],
              answer_types: dict[str, str] | None = None,
              errored: int = 0) -> EvalReport:
    """Aggregate (question_id, utility) pairs into an EvalReport.

    Instances without a canonical answer type only count toward the overall
    number. Errored instances are reported in counts but excluded from means.
    """
    if not results:
        raise ValueError("no per-instance results to aggregate")
    answer_types = answer_types or {}
    utilities = [u for _, u in results]
    overall = 100.0 * sum(utilities) / len(utilities)

    by_type: dict[str, float] = {}
    counts: dict[str, int] = {"total": len(results), "errored": errored}
    for bucket in ANSWER_TYPE_BUCKETS:
        vals = [u for qid, u in results if answer_types.get(qid) == bucket]
        counts[bucket] = len(vals)
        if vals:
            by_type[bucket] = 100.0 * sum(vals) / len(vals)

    per_instance = [{"question_id": qid, "utility": u} for qid, u in results]
    return EvalReport(overall=overall, by_type=by_type, per_instance=per_instance, counts=counts)
