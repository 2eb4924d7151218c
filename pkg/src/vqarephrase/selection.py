"""Candidate answering and confidence-based selection.

Each candidate question is answered by the model; the answer-confidence
score is exp of the mean answer-token log-probability (for multiple choice,
the chosen label's probability renormalized over the four label tokens).
Alternate scorers: true/false self-assessment (optionally conditioned on
all plausible answers) and bare question likelihood. Oracle selection picks
the utility-maximizing candidate using gold answers, ties broken by a
seeded uniform draw.
"""

from __future__ import annotations

import logging
import math
import random
import re
from dataclasses import dataclass, field
from statistics import fmean
from typing import Callable

from .datamodel import CHOICE_LABELS, ImageRef, QuestionInstance
from .model_client import (
    CapabilityError,
    ModelClient,
    SamplingParams,
    text_request,
)
from .prompts import PromptRegistry, choices_block

log = logging.getLogger(__name__)

SCORERS = ("answer_conf", "true_false", "true_false_multi", "question_likelihood")
SCORER_MODES = {
    "answer_conf": "confidence",
    "true_false": "true_false",
    "true_false_multi": "true_false_multi",
    "question_likelihood": "question_likelihood",
}

_LABEL_RE = re.compile(r"\b(?:option\s+)?([A-Da-d])\b[.)]?")


class AnswerError(Exception):
    """Answering a candidate failed beyond recovery; instance is errored."""


@dataclass
class AnswerResult:
    answer: str
    token_logprobs: list[float] = field(default_factory=list)
    label_probs: dict[str, float] | None = None  # MC only, renormalized


@dataclass
class ScoredCandidate:
    question: str
    answer: str
    answer_token_logprobs: list[float]
    score: float
    scorer: str


@dataclass
class SelectionResult:
    chosen_index: int
    chosen_question: str
    chosen_answer: str
    all_scored: list[ScoredCandidate]
    mode: str
    utilities: list[float] | None = None


def parse_choice_label(text: str) -> str | None:
    match = _LABEL_RE.search(text)
    return match.group(1).upper() if match else None


def _two_turn(client: ModelClient,
              image: ImageRef | None,
              first_prompt: str,
              followup: str,
              seed: int | None,
              purpose: str,
              max_new_tokens: int,
              length_penalty: float | None = None):
    first_req = text_request(first_prompt, image=image,
                             sampling=SamplingParams(max_new_tokens=64),
                             stop_markers=["\n\n"], seed=seed, purpose=f"{purpose}_turn1")
    first = client.generate(first_req).samples[0].text.strip()
    second_prompt = f"{first_prompt}\n{first}\n{followup}"
    second_req = text_request(second_prompt, image=image,
                              sampling=SamplingParams(max_new_tokens=max_new_tokens,
                                                      length_penalty=length_penalty),
                              want_logprobs=True, stop_markers=["\n"],
                              seed=seed, purpose=purpose)
    return client.generate(second_req).samples[0]


def _mc_label_probs(client: ModelClient,
                    image: ImageRef | None,
                    prompt: str,
                    seed: int | None) -> dict[str, float] | None:
    """Probabilities over the 4 label tokens, renormalized to sum to 1."""
    request = text_request(prompt, image=image, seed=seed, purpose="mc_label_scores")
    try:
        weights = {
            label: math.exp(sum(t.logprob for t in client.score_text(request, label)))
            for label in CHOICE_LABELS
        }
    except CapabilityError:
        return None
    total = sum(weights.values())
    if total <= 0:
        return None
    return {label: w / total for label, w in weights.items()}


def answer_candidate(client: ModelClient,
                     prompts: PromptRegistry,
                     image: ImageRef | None,
                     question: str,
                     task_mode: str,
                     choices: list[str] | None = None,
                     context_prefix: str = "",
                     seed: int | None = None,
                     max_new_tokens: int = 8) -> AnswerResult:
    """Answer one candidate question.

    Direct mode returns a greedy short answer with its token logprobs
    (length penalty -1 passed through, small max_new_tokens as backstop).
    Multiple choice returns a label in A-D; when the generated text has no
    parseable label, the four label tokens are scored directly and the
    argmax wins. Chat-style registries add their follow-up turn.
    """
    if task_mode == "multiple_choice":
        if not choices:
            raise ValueError("multiple_choice answering requires choices")
        prompt = context_prefix + prompts.render("vqa_mc", question=question,
                                                 choices_block=choices_block(choices))
        if prompts.has("vqa_mc_followup"):
            sample = _two_turn(client, image, prompt, prompts.render("vqa_mc_followup"),
                               seed, "answer", max_new_tokens=4)
        else:
            request = text_request(prompt, image=image,
                                   sampling=SamplingParams(max_new_tokens=4),
                                   want_logprobs=True, stop_markers=["\n"],
                                   seed=seed, purpose="answer")
            sample = client.generate(request).samples[0]

        label = parse_choice_label(sample.text)
        label_probs = _mc_label_probs(client, image, prompt, seed)
        if label is None:
            if label_probs is None:
                raise AnswerError(
                    f"no parseable choice label in {sample.text!r} and backend "
                    "cannot score label tokens")
            label = max(CHOICE_LABELS, key=lambda lb: label_probs[lb])
        if label_probs is not None:
            token_logprobs = [math.log(max(label_probs[label], 1e-300))]
        else:
            token_logprobs = [t.logprob for t in sample.tokens]
        return AnswerResult(answer=label, token_logprobs=token_logprobs,
                            label_probs=label_probs)

    prompt = context_prefix + prompts.render("vqa_direct", question=question)
    if prompts.has("vqa_direct_followup"):
        sample = _two_turn(client, image, prompt, prompts.render("vqa_direct_followup"),
                           seed, "answer", max_new_tokens=max_new_tokens, length_penalty=-1.0)
    else:
        request = text_request(prompt, image=image,
                               sampling=SamplingParams(max_new_tokens=max_new_tokens,
                                                       length_penalty=-1.0),
                               want_logprobs=True, stop_markers=["\n"],
                               seed=seed, purpose="answer")
        sample = client.generate(request).samples[0]
    return AnswerResult(answer=sample.text.strip(),
                        token_logprobs=[t.logprob for t in sample.tokens])


def score_answer_confidence(token_logprobs: list[float]) -> float:
    """exp(mean token logprob); the geometric mean of token probabilities."""
    if not token_logprobs:
        log.warning("empty answer scored as 0")
        return 0.0
    return math.exp(fmean(token_logprobs))


def score_true_false(client: ModelClient,
                     prompts: PromptRegistry,
                     image: ImageRef | None,
                     question: str,
                     proposed_answer: str,
                     task_mode: str = "direct",
                     choices: list[str] | None = None,
                     plausible: list[str] | None = None,
                     seed: int | None = None) -> float:
    """P(True) for the proposed answer, renormalized over {True, False}."""
    if not proposed_answer.strip():
        raise ValueError("proposed answer must be non-empty")
    if task_mode == "multiple_choice" and choices:
        vqa_prompt = prompts.render("vqa_mc", question=question,
                                    choices_block=choices_block(choices))
    else:
        vqa_prompt = prompts.render("vqa_direct", question=question)
    if plausible:
        prompt = prompts.render("true_false_multi", vqa_prompt=vqa_prompt,
                                answer=proposed_answer, plausible=", ".join(plausible))
    else:
        prompt = prompts.render("true_false", vqa_prompt=vqa_prompt, answer=proposed_answer)

    request = text_request(prompt, image=image, seed=seed, purpose="true_false")
    weights = {}
    for option in ("True", "False"):
        logprobs = client.score_text(request, option)
        weights[option] = math.exp(sum(t.logprob for t in logprobs))
    total = weights["True"] + weights["False"]
    if total <= 0:
        raise CapabilityError("backend produced no probability mass for True/False labels")
    return weights["True"] / total


def score_question_likelihood(client: ModelClient,
                              prompts: PromptRegistry,
                              image: ImageRef | None,
                              question: str,
                              seed: int | None = None) -> float:
    """exp(mean logprob) of the question tokens conditioned on the image."""
    if not question.strip():
        raise ValueError("question must be non-empty")
    context = prompts.render("question_likelihood")
    request = text_request(context, image=image, seed=seed, purpose="question_likelihood")
    logprobs = client.score_text(request, question)
    return math.exp(fmean(t.logprob for t in logprobs))


def select(scored: list[ScoredCandidate]) -> SelectionResult:
    """Argmax selection; exact ties keep the smallest index (the original)."""
    if not scored:
        raise ValueError("cannot select from an empty candidate list")
    best = 0
    for i, cand in enumerate(scored):
        if cand.score > scored[best].score:
            best = i
    mode = SCORER_MODES.get(scored[best].scorer, "confidence")
    return SelectionResult(chosen_index=best,
                           chosen_question=scored[best].question,
                           chosen_answer=scored[best].answer,
                           all_scored=scored,
                           mode=mode)


def oracle_select(scored: list[ScoredCandidate],
                  instance: QuestionInstance,
                  seed: int,
                  utility_fn: Callable[[str, QuestionInstance], float]) -> SelectionResult:
    """Select the utility-maximizing candidate against gold answers.

    Ties are broken by a seeded uniform draw, so reruns reproduce the same
    choice.
    """
    if not scored:
        raise ValueError("cannot select from an empty candidate list")
    utilities = [utility_fn(cand.answer, instance) for cand in scored]
    best = max(utilities)
    tied = [i for i, u in enumerate(utilities) if u == best]
    rng = random.Random(seed)
    chosen = tied[rng.randrange(len(tied))]
    return SelectionResult(chosen_index=chosen,
                           chosen_question=scored[chosen].question,
                           chosen_answer=scored[chosen].answer,
                           all_scored=scored,
                           mode="oracle",
                           utilities=utilities)
