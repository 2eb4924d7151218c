"""Candidate question generation: sentence fusion over extracted details,
validity filtering (question mark, duplicates, NLI contradiction), and
padding with the original so the set always has exactly n members."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .datamodel import ImageRef
from .model_client import (
    ModelClient,
    ModelError,
    NliError,
    SamplingParams,
    _stable_hash,
    text_request,
)
from .prompts import PromptRegistry

log = logging.getLogger(__name__)


@dataclass
class FuseConfig:
    batch_factor: int = 2  # samples per batch = batch_factor * (n - 1)
    max_batches: int = 3
    top_p: float = 0.95
    temperature: float = 1.0
    max_new_tokens: int = 48
    nli_filter: bool = True
    nli_fail_open: bool = True
    paraphrase_nli: bool = False


@dataclass
class CandidateSet:
    """Ordered question candidates; index 0 is always the original."""

    original: str
    candidates: list[str]
    provenance: list[str]  # original | fusion_sample | paraphrase_sample | original_pad
    n: int
    nli_log: list[dict] = field(default_factory=list)


def _normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def _clean_sample(text: str) -> str:
    """Trim a raw fusion sample down to one candidate question."""
    s = text.strip()
    if s.lower().startswith("modified question:"):
        s = s[len("modified question:"):].strip()
    if s:
        s = s.splitlines()[0].strip()
    qmark = s.find("?")
    if qmark != -1:
        s = s[: qmark + 1]
    s = s.strip().strip('"').strip()
    return re.sub(r"\s+", " ", s)


def _derive_seed(seed: int | None, batch: int) -> int:
    return _stable_hash(f"{seed}:{batch}") % (2**31)


def _collect_candidates(client: ModelClient,
                        prompt: str,
                        question: str,
                        n: int,
                        seed: int | None,
                        cfg: FuseConfig,
                        image: ImageRef | None,
                        nli_filter: bool,
                        provenance_label: str,
                        purpose: str) -> CandidateSet:
    original_norm = _normalize(question)
    kept: list[str] = []
    nli_log: list[dict] = []
    failures = 0

    for batch in range(cfg.max_batches):
        if len(kept) >= n - 1:
            break
        request = text_request(
            prompt,
            image=image,
            sampling=SamplingParams(
                mode="top_p",
                p=cfg.top_p,
                temperature=cfg.temperature,
                max_new_tokens=cfg.max_new_tokens,
                num_samples=cfg.batch_factor * (n - 1),
            ),
            stop_markers=["\n"],
            seed=_derive_seed(seed, batch),
            purpose=purpose,
        )
        try:
            response = client.generate(request)
        except ModelError as exc:
            failures += 1
            log.warning("%s batch %d failed: %s", purpose, batch, exc)
            continue

        for sample in response.samples:
            if len(kept) >= n - 1:
                break
            candidate = _clean_sample(sample.text)
            if not candidate.endswith("?"):
                continue
            norm = _normalize(candidate)
            if norm == original_norm or any(norm == _normalize(k) for k in kept):
                continue
            if nli_filter:
                try:
                    verdict = client.nli_classify(question, candidate)
                except (NliError, ModelError) as exc:
                    keep = cfg.nli_fail_open
                    nli_log.append({"candidate": candidate, "label": "error", "kept": keep})
                    log.warning("NLI failed for candidate (%s): %s",
                                "kept" if keep else "dropped", exc)
                    if not keep:
                        continue
                else:
                    keep = verdict.label != "contradiction"
                    nli_log.append({"candidate": candidate, "label": verdict.label, "kept": keep})
                    if not keep:
                        continue
            kept.append(candidate)

    if failures == cfg.max_batches:
        log.warning("all %s batches failed; candidate set degrades to the original question",
                    purpose)
    pads = n - 1 - len(kept)
    candidates = [question] + kept + [question] * pads
    provenance = ["original"] + [provenance_label] * len(kept) + ["original_pad"] * pads
    return CandidateSet(original=question, candidates=candidates,
                        provenance=provenance, n=n, nli_log=nli_log)


def generate_candidates(client: ModelClient,
                        prompts: PromptRegistry,
                        question: str,
                        details_block: str,
                        n: int,
                        seed: int | None = None,
                        cfg: FuseConfig | None = None,
                        image: ImageRef | None = None) -> CandidateSet:
    """Sentence-fuse the question with its details block into n candidates.

    Samples are drawn in batches of batch_factor*(n-1), up to max_batches,
    until n-1 distinct valid candidates are collected; a shortfall pads with
    the original. Validity: ends with '?', not a normalized copy of the
    original or a kept candidate, and no NLI contradiction against the
    original (premise = original, hypothesis = candidate). Fusion requests
    are text-only unless an image is explicitly attached.
    """
    cfg = cfg or FuseConfig()
    if n < 2:
        raise ValueError("n must be >= 2")
    question = question.strip()
    if not question.endswith("?"):
        raise ValueError("question must end with '?'")

    prompt = prompts.render("fusion", question=question, details_block=details_block,
                            exemplars=prompts.exemplars_block())
    return _collect_candidates(client, prompt, question, n, seed, cfg, image,
                               nli_filter=cfg.nli_filter,
                               provenance_label="fusion_sample", purpose="fusion")


def generate_candidates_with_image(client: ModelClient,
                                   prompts: PromptRegistry,
                                   question: str,
                                   details_block: str,
                                   n: int,
                                   image: ImageRef,
                                   seed: int | None = None,
                                   cfg: FuseConfig | None = None) -> CandidateSet:
    """Ablation variant: same fusion request with the image attached."""
    return generate_candidates(client, prompts, question, details_block, n,
                               seed=seed, cfg=cfg, image=image)


def paraphrase_candidates(client: ModelClient,
                          prompts: PromptRegistry,
                          question: str,
                          n: int,
                          seed: int | None = None,
                          cfg: FuseConfig | None = None) -> CandidateSet:
    """Baseline: n-1 paraphrases of the question, '?'-validity filtered.

    Paraphrases are meaning-preserving by construction, so the NLI filter is
    off unless cfg.paraphrase_nli enables it.
    """
    cfg = cfg or FuseConfig()
    if n < 2:
        raise ValueError("n must be >= 2")
    question = question.strip()
    if not question.endswith("?"):
        raise ValueError("question must end with '?'")

    prompt = prompts.render("paraphrase", question=question)
    return _collect_candidates(client, prompt, question, n, seed, cfg, image=None,
                               nli_filter=cfg.paraphrase_nli,
                               provenance_label="paraphrase_sample", purpose="paraphrase")
