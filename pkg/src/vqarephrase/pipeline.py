"""End-to-end orchestration: dataset -> detail extraction -> candidate
fusion -> answering/scoring -> selection -> evaluation -> reports.

Runs are resumable (existing per-instance records are reused), deterministic
under the mock backend (per-instance seeds derive from the global seed and
the question id, so execution order never changes sampling), and bounded by
a global in-flight request limit.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import evaluation, extract, fuse, keywords, selection
from .datamodel import QuestionInstance, load_dataset, load_jsonl, sample_dev_split, DevSplitSpec
from .extract import ExtractConfig, StageError
from .fuse import CandidateSet, FuseConfig
from .model_client import (
    HttpBackend,
    HttpNliProvider,
    MockBackend,
    ModelClient,
    ModelError,
    StubNliProvider,
    _stable_hash,
)
from .prompts import PromptError, PromptRegistry
from .selection import SCORER_MODES, SCORERS, AnswerError

log = logging.getLogger(__name__)

ABLATIONS = frozenset({
    "no_rationale",
    "no_caption",
    "no_question_entity",
    "fuse_with_image",
    "paraphrase_baseline",
    "llm_only",
    "caption_plus_question",
    "details_plus_question",
    "oracle",
})

ANSWER_TYPE_COLUMNS = ("yes/no", "number", "other")

API_KEY_ENV = "VQAREPHRASE_API_KEY"


class ConfigError(Exception):
    """Invalid pipeline configuration."""


@dataclass
class PipelineConfig:
    dataset: str = "jsonl"  # vqav2 | aokvqa | vizwiz | jsonl
    data_path: str = ""
    split: str = "val"
    n: int = 5
    seed: int = 0
    scorer: str = "answer_conf"
    backend: str = "mock"  # mock | http
    mock_table: str | None = None
    endpoint_url: str | None = None
    endpoint_model: str | None = None
    endpoint_supports_score: bool = False
    backend_style: str = "completion"  # prompt template family
    ablations: set[str] = field(default_factory=set)
    max_inflight: int = 8
    cache_dir: str | None = None
    output_dir: str = "runs/out"
    stoplist_path: str | None = None
    prompt_registry_path: str | None = None
    max_question_entities: int = 3
    max_rationale_entities: int = 3
    detail_max_sentences: int = 2
    max_new_tokens_answer: int = 8
    id_count_aux: bool = False
    official_vqa_averaging: bool = False
    nli_provider: str = "prompt"  # prompt | none | stub:<label> | http:<url>
    log_prompts: bool = False
    force: bool = False
    limit: int | None = None
    sample_size: int | None = None

    def validate(self) -> None:
        if self.n < 2:
            raise ConfigError("n must be >= 2")
        unknown = set(self.ablations) - ABLATIONS
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if "paraphrase_baseline" in self.ablations:
            clash = self.ablations & {"fuse_with_image", "no_rationale", "no_caption",
                                      "no_question_entity", "caption_plus_question",
                                      "details_plus_question"}
            if clash:
                raise ConfigError(
                    f"paraphrase_baseline is mutually exclusive with {sorted(clash)}")
        if {"caption_plus_question", "details_plus_question"} <= self.ablations:
            raise ConfigError("caption_plus_question and details_plus_question are exclusive")
        if self.backend == "mock" and not self.mock_table:
            raise ConfigError("mock backend requires mock_table")
        if self.backend == "http" and not (self.endpoint_url and self.endpoint_model):
            raise ConfigError("http backend requires endpoint_url and endpoint_model")
        if self.backend not in ("mock", "http"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")

    def to_dict(self) -> dict:
        payload = {
            k: (sorted(v) if isinstance(v, set) else v)
            for k, v in self.__dict__.items()
        }
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        data = dict(payload)
        if "ablations" in data:
            data["ablations"] = set(data["ablations"])
        return cls(**data)


def instance_seed(global_seed: int, question_id: str) -> int:
    """Stable per-instance seed so execution order cannot affect sampling."""
    return _stable_hash(f"{global_seed}:{question_id}") % (2**31)


def build_client(config: PipelineConfig, api_key: str | None = None) -> ModelClient:
    if config.backend == "mock":
        backend = MockBackend.from_file(config.mock_table)
    else:
        backend = HttpBackend(config.endpoint_url, config.endpoint_model,
                              api_key=api_key,
                              supports_score=config.endpoint_supports_score)

    provider = None
    spec = config.nli_provider
    if spec.startswith("stub:"):
        provider = StubNliProvider(spec.split(":", 1)[1])
    elif spec.startswith("http:") or spec.startswith("https:"):
        provider = HttpNliProvider(spec)
    elif spec not in ("prompt", "none"):
        raise ConfigError(f"unknown nli provider {spec!r}")

    return ModelClient(backend,
                       cache_dir=config.cache_dir,
                       max_inflight=config.max_inflight,
                       nli_provider=provider,
                       log_prompts=config.log_prompts)


def build_prompts(config: PipelineConfig) -> PromptRegistry:
    return PromptRegistry.load(config.prompt_registry_path, style=config.backend_style)


def load_instances(config: PipelineConfig) -> list[QuestionInstance]:
    if config.dataset == "jsonl":
        instances = load_jsonl(config.data_path)
    else:
        instances = load_dataset(config.data_path, config.dataset, config.split)
    if config.sample_size is not None:
        spec = DevSplitSpec(dataset=config.dataset, sample_size=config.sample_size,
                            seed=config.seed)
        instances = sample_dev_split(instances, spec)
    return instances


def _extract_config(config: PipelineConfig) -> ExtractConfig:
    abl = config.ablations
    return ExtractConfig(
        max_question_entities=config.max_question_entities,
        max_rationale_entities=config.max_rationale_entities,
        detail_max_sentences=config.detail_max_sentences,
        use_question_entities="no_question_entity" not in abl,
        use_rationale="no_rationale" not in abl,
        use_caption="no_caption" not in abl,
    )


def _fuse_config(config: PipelineConfig) -> FuseConfig:
    nli_filter = config.nli_provider != "none"
    return FuseConfig(nli_filter=nli_filter)


def _gold_available(inst: QuestionInstance) -> bool:
    if inst.task_mode == "multiple_choice":
        return inst.correct_choice_idx is not None
    return bool(inst.gold_answers)


def _single_candidate_set(question: str) -> CandidateSet:
    return CandidateSet(original=question, candidates=[question],
                        provenance=["original"], n=1, nli_log=[])


def process_instance(inst: QuestionInstance,
                     config: PipelineConfig,
                     client: ModelClient,
                     prompts: PromptRegistry,
                     stoplist: frozenset[str]) -> dict:
    """Run all pipeline stages for one instance and build its run record.

    Per-instance failures are captured in the record's "error" field; only
    configuration or I/O level problems propagate.
    """
    abl = config.ablations
    iseed = instance_seed(config.seed, inst.question_id)
    client.begin_trace()
    record: dict = {
        "question_id": inst.question_id,
        "question": inst.question,
        "task_mode": inst.task_mode,
        "answer_type": inst.answer_type,
        "image_id": inst.image.id,
        "seed": iseed,
        "error": None,
    }

    try:
        llm_only = "llm_only" in abl
        answer_image = None if llm_only else inst.image
        context_prefix = ""

        if "caption_plus_question" in abl:
            caption = extract.generate_caption(client, prompts, inst.image, seed=iseed)
            context_prefix = f"image: {caption}\n"
            answer_image = None
            cands = _single_candidate_set(inst.question)
        elif "details_plus_question" in abl:
            details = extract.collect_visual_details(
                client, prompts, inst.image, inst.question, _extract_config(config),
                stoplist=stoplist, seed=iseed)
            block = extract.assemble_details_block(details)
            context_prefix = f"{block}\n" if block else ""
            answer_image = None
            cands = _single_candidate_set(inst.question)
        elif "paraphrase_baseline" in abl:
            cands = fuse.paraphrase_candidates(client, prompts, inst.question,
                                               config.n, seed=iseed,
                                               cfg=_fuse_config(config))
        else:
            details = extract.collect_visual_details(
                client, prompts, inst.image, inst.question, _extract_config(config),
                stoplist=stoplist, seed=iseed)
            block = extract.assemble_details_block(details)
            fusion_image = inst.image if "fuse_with_image" in abl else None
            cands = fuse.generate_candidates(client, prompts, inst.question, block,
                                             config.n, seed=iseed,
                                             cfg=_fuse_config(config), image=fusion_image)

        answers = [
            selection.answer_candidate(
                client, prompts, answer_image, candidate, inst.task_mode,
                choices=inst.choices, context_prefix=context_prefix, seed=iseed,
                max_new_tokens=config.max_new_tokens_answer)
            for candidate in cands.candidates
        ]

        plausible: list[str] = []
        for ans in answers:
            if ans.answer and ans.answer not in plausible:
                plausible.append(ans.answer)

        scores: list[float] = []
        for candidate, ans in zip(cands.candidates, answers):
            if config.scorer == "answer_conf":
                score = selection.score_answer_confidence(ans.token_logprobs)
            elif config.scorer == "question_likelihood":
                score = selection.score_question_likelihood(
                    client, prompts, answer_image, candidate, seed=iseed)
            else:
                score = selection.score_true_false(
                    client, prompts, answer_image, candidate, ans.answer,
                    task_mode=inst.task_mode, choices=inst.choices,
                    plausible=plausible if config.scorer == "true_false_multi" else None,
                    seed=iseed)
            scores.append(score)

        scored = [
            selection.ScoredCandidate(question=cand, answer=ans.answer,
                                      answer_token_logprobs=ans.token_logprobs,
                                      score=score, scorer=config.scorer)
            for cand, ans, score in zip(cands.candidates, answers, scores)
        ]

        sel = selection.select(scored)
        gold = _gold_available(inst)
        utilities = None
        if gold:
            utilities = [
                evaluation.instance_utility(ans.answer, inst, config.official_vqa_averaging)
                for ans in answers
            ]

        mode_key = SCORER_MODES[config.scorer]
        modes = {
            "baseline": {
                "chosen_index": 0,
                "answer": answers[0].answer,
                "utility": utilities[0] if utilities else None,
            },
            mode_key: {
                "chosen_index": sel.chosen_index,
                "question": sel.chosen_question,
                "answer": sel.chosen_answer,
                "utility": utilities[sel.chosen_index] if utilities else None,
            },
        }
        if "oracle" in abl and gold:
            oracle = selection.oracle_select(
                scored, inst, iseed,
                lambda answer, instance: evaluation.instance_utility(
                    answer, instance, config.official_vqa_averaging))
            modes["oracle"] = {
                "chosen_index": oracle.chosen_index,
                "question": oracle.chosen_question,
                "answer": oracle.chosen_answer,
                "utility": oracle.utilities[oracle.chosen_index],
            }

        record.update({
            "candidates": [
                {"text": c, "provenance": p}
                for c, p in zip(cands.candidates, cands.provenance)
            ],
            "nli": cands.nli_log,
            "answers": [
                {"text": ans.answer, "score": score,
                 "token_logprobs": list(ans.token_logprobs)}
                for ans, score in zip(answers, scores)
            ],
            "utilities": utilities,
            "modes": modes,
        })
    except (ModelError, StageError, AnswerError, PromptError, ValueError) as exc:
        record["error"] = f"{type(exc).__name__}: {exc}"

    trace = client.take_trace()
    record["prompts"] = trace
    record["model_calls"] = len(trace)
    return record


def _dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class _OrderedWriter:
    """Flush records to a JSONL stream strictly in dataset order."""

    def __init__(self, fh):
        self._fh = fh
        self._pending: dict[int, dict] = {}
        self._next = 0
        self.written: list[dict] = []

    def put(self, index: int, record: dict) -> None:
        self._pending[index] = record
        while self._next in self._pending:
            rec = self._pending.pop(self._next)
            self._fh.write(_dump_record(rec) + "\n")
            self._fh.flush()
            self.written.append(rec)
            self._next += 1


def _load_existing_records(path: Path) -> dict[str, dict]:
    existing: dict[str, dict] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: corrupt record, rerun with force") from exc
            existing[rec["question_id"]] = rec
    return existing


def run_pipeline(config: PipelineConfig) -> dict:
    """Run the full pipeline and write records.jsonl, report.csv, report.json.

    Instances with existing records in the output directory are skipped
    unless config.force; config.limit caps how many new instances are
    processed (the resume point for an interrupted run).
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    instances = load_instances(config)
    if not instances:
        raise ConfigError("no instances to process")
    prompts = build_prompts(config)
    stoplist = keywords.load_stoplist(config.stoplist_path)
    client = build_client(config, api_key=os.environ.get(API_KEY_ENV))

    records_path = out / "records.jsonl"
    existing: dict[str, dict] = {}
    if records_path.exists() and not config.force:
        existing = _load_existing_records(records_path)

    config_path = out / "config.json"
    config_path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True),
                           encoding="utf-8")

    started = time.monotonic()
    with records_path.open("w", encoding="utf-8") as fh:
        writer = _OrderedWriter(fh)
        scheduled: list[tuple[int, QuestionInstance]] = []
        new_budget = config.limit
        for idx, inst in enumerate(instances):
            if inst.question_id in existing:
                writer.put(idx, existing[inst.question_id])
                continue
            if new_budget is not None and len(scheduled) >= new_budget:
                break
            scheduled.append((idx, inst))

        if scheduled:
            with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
                futures = {
                    pool.submit(process_instance, inst, config, client, prompts, stoplist): idx
                    for idx, inst in scheduled
                }
                for future in as_completed(futures):
                    writer.put(futures[future], future.result())

    records = writer.written
    log.info("processed %d instances (%d new) in %.1fs",
             len(records), len(scheduled), time.monotonic() - started)
    if not records:
        raise ConfigError("run produced no records")
    report = emit_report(records, config, out)
    return {"records": records, "report": report}


def _mode_order(records: list[dict]) -> list[str]:
    ordered = ["baseline"]
    for mode in SCORER_MODES.values():
        if any(mode in (r.get("modes") or {}) for r in records):
            ordered.append(mode)
    if any("oracle" in (r.get("modes") or {}) for r in records):
        ordered.append("oracle")
    return ordered


def emit_report(records: list[dict], config: PipelineConfig, output_dir: str | Path) -> dict:
    """Aggregate run records into report.csv and report.json.

    Errored instances are excluded from the means and surfaced as a count;
    file contents are deterministic given the records.
    """
    if not records:
        raise ValueError("no records to report")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    good = [r for r in records if not r.get("error")]
    errored = len(records) - len(good)
    answer_types = {r["question_id"]: r.get("answer_type") for r in good}

    modes = {}
    for mode in _mode_order(records):
        results = [
            (r["question_id"], r["modes"][mode]["utility"])
            for r in good
            if mode in (r.get("modes") or {}) and r["modes"][mode].get("utility") is not None
        ]
        if not results:
            continue
        modes[mode] = evaluation.aggregate(results, answer_types, errored=errored)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["mode", "overall", *ANSWER_TYPE_COLUMNS, "instances", "errored"])
    for mode, report in modes.items():
        row = [mode, f"{report.overall:.4f}"]
        for bucket in ANSWER_TYPE_COLUMNS:
            row.append(f"{report.by_type[bucket]:.4f}" if bucket in report.by_type else "")
        row.extend([report.counts["total"], report.counts["errored"]])
        writer.writerow(row)
    (out / "report.csv").write_text(buffer.getvalue(), encoding="utf-8")

    payload = {
        "scorer": config.scorer,
        "score_formula": _score_formula(config.scorer),
        "n": config.n,
        "seed": config.seed,
        "ablations": sorted(config.ablations),
        "counts": {"records": len(records), "errored": errored},
        "modes": {mode: report.to_dict() for mode, report in modes.items()},
    }
    (out / "report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return payload


def _score_formula(scorer: str) -> str:
    return {
        "answer_conf": "exp(mean answer-token logprob)",
        "true_false": "P(True) renormalized over {True, False}",
        "true_false_multi": "P(True | plausible answers) renormalized over {True, False}",
        "question_likelihood": "exp(mean question-token logprob | image)",
    }[scorer]


def sweep_n(config: PipelineConfig, n_values: list[int]) -> dict:
    """Selection and oracle accuracy for nested candidate prefixes.

    One run at max(n_values) produces the candidate sets; smaller n reuse
    the prefix (same seed), which makes per-instance oracle utility
    monotone in n by construction. Emits sweep_n.csv.
    """
    if not n_values:
        raise ConfigError("n_values must be non-empty")
    if sorted(n_values) != list(n_values):
        raise ConfigError("n_values must be sorted ascending")
    if n_values[0] < 2:
        raise ConfigError("all n values must be >= 2")

    full = run_pipeline(replace(config, n=n_values[-1]))
    good = [r for r in full["records"] if not r.get("error") and r.get("utilities")]

    rows = []
    per_instance: dict[str, dict[int, dict]] = {}
    for n in n_values:
        sel_utils, oracle_utils, base_utils = [], [], []
        for rec in good:
            utilities = rec["utilities"][:n]
            scores = [a["score"] for a in rec["answers"][:n]]
            best = 0
            for i, s in enumerate(scores):
                if s > scores[best]:
                    best = i
            sel_utils.append(utilities[best])
            oracle_utils.append(max(utilities))
            base_utils.append(utilities[0])
            per_instance.setdefault(rec["question_id"], {})[n] = {
                "selection": utilities[best],
                "oracle": max(utilities),
            }
        count = len(good)
        rows.append({
            "n": n,
            "selection": 100.0 * sum(sel_utils) / count,
            "oracle": 100.0 * sum(oracle_utils) / count,
            "baseline": 100.0 * sum(base_utils) / count,
        })

    out = Path(config.output_dir)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["n", "selection", "oracle", "baseline"])
    for row in rows:
        writer.writerow([row["n"], f"{row['selection']:.4f}",
                         f"{row['oracle']:.4f}", f"{row['baseline']:.4f}"])
    (out / "sweep_n.csv").write_text(buffer.getvalue(), encoding="utf-8")
    return {"rows": rows, "per_instance": per_instance, "records": full["records"]}


def run_multi_seed(config: PipelineConfig, seeds: list[int]) -> dict:
    """Run the pipeline once per seed and summarize mean and spread."""
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    per_seed = {}
    for seed in seeds:
        sub = replace(config, seed=seed,
                      output_dir=str(Path(config.output_dir) / f"seed_{seed}"))
        per_seed[seed] = run_pipeline(sub)["report"]

    modes = sorted({m for rep in per_seed.values() for m in rep["modes"]})
    summary = {}
    for mode in modes:
        values = [rep["modes"][mode]["overall"] for rep in per_seed.values()
                  if mode in rep["modes"]]
        mean = sum(values) / len(values)
        # sample standard deviation; 0 for a single seed
        var = (sum((v - mean) ** 2 for v in values) / (len(values) - 1)) if len(values) > 1 else 0.0
        summary[mode] = {"mean": mean, "stddev": var ** 0.5, "values": values}

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["mode", "mean", "stddev", *[f"seed_{s}" for s in seeds]])
    for mode in modes:
        row = [mode, f"{summary[mode]['mean']:.4f}", f"{summary[mode]['stddev']:.4f}"]
        row.extend(f"{v:.4f}" for v in summary[mode]["values"])
        writer.writerow(row)
    (out / "multiseed_summary.csv").write_text(buffer.getvalue(), encoding="utf-8")
    return summary
