"""Canonical data types for VQA instances plus dataset adapters.

Adapters map the published VQAv2, A-OKVQA, and VizWiz JSON layouts onto a
single QuestionInstance schema. Images are referenced by path and content
hash only; nothing in this module decodes pixels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

DATASETS = ("vqav2", "aokvqa", "vizwiz")
TASK_MODES = ("direct", "multiple_choice")
CHOICE_LABELS = ("A", "B", "C", "D")

# default dev-split sizes when sampling from the train split
DEV_SPLIT_SIZES = {"vqav2": 5000, "aokvqa": 1000, "vizwiz": 500}


class LoadError(Exception):
    """A dataset file is missing or structurally unusable."""


@dataclass(frozen=True)
class ImageRef:
    """Reference to an image by id, location, and content hash."""

    id: str
    source: str
    bytes_hash: str

    @classmethod
    def from_source(cls, image_id: str | int, source: str | Path) -> "ImageRef":
        """Build a reference, hashing file bytes when the source exists locally.

        Missing files fall back to hashing the id, so cache keys stay stable
        for runs that never materialize the images on disk.
        """
        path = Path(source)
        if path.is_file():
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
        else:
            digest = hashlib.sha256(str(image_id).encode("utf-8")).hexdigest()
        return cls(id=str(image_id), source=str(source), bytes_hash=digest)

    def to_dict(self) -> dict:
        return {"id": self.id, "source": self.source, "bytes_hash": self.bytes_hash}

    @classmethod
    def from_dict(cls, payload: dict) -> "ImageRef":
        return cls(id=payload["id"], source=payload["source"], bytes_hash=payload["bytes_hash"])


@dataclass
class QuestionInstance:
    """One dataset example in the uniform schema."""

    question_id: str
    image: ImageRef
    question: str
    task_mode: str = "direct"
    gold_answers: list[str] = field(default_factory=list)
    choices: list[str] | None = None
    correct_choice_idx: int | None = None
    answer_type: str | None = None

    def validate(self) -> None:
        if not self.question_id:
            raise ValueError("question_id must be non-empty")
        if not self.question.strip().endswith("?"):
            raise ValueError(f"question must end with '?': {self.question!r}")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"unknown task_mode {self.task_mode!r}")
        if self.task_mode == "multiple_choice":
            if self.choices is None or len(self.choices) != 4:
                raise ValueError("multiple_choice requires exactly 4 choices")
            if self.correct_choice_idx is None or not 0 <= self.correct_choice_idx <= 3:
                raise ValueError("multiple_choice requires correct_choice_idx in [0, 3]")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "image": self.image.to_dict(),
            "question": self.question,
            "task_mode": self.task_mode,
            "gold_answers": list(self.gold_answers),
            "choices": list(self.choices) if self.choices is not None else None,
            "correct_choice_idx": self.correct_choice_idx,
            "answer_type": self.answer_type,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "QuestionInstance":
        return cls(
            question_id=payload["question_id"],
            image=ImageRef.from_dict(payload["image"]),
            question=payload["question"],
            task_mode=payload.get("task_mode", "direct"),
            gold_answers=list(payload.get("gold_answers") or []),
            choices=list(payload["choices"]) if payload.get("choices") is not None else None,
            correct_choice_idx=payload.get("correct_choice_idx"),
            answer_type=payload.get("answer_type"),
        )


@dataclass(frozen=True)
class DevSplitSpec:
    """Deterministic dev-split sampling request."""

    dataset: str
    sample_size: int
    seed: int

    @classmethod
    def default_for(cls, dataset: str, seed: int) -> "DevSplitSpec":
        if dataset not in DEV_SPLIT_SIZES:
            raise ValueError(f"no default dev-split size for dataset {dataset!r}")
        return cls(dataset=dataset, sample_size=DEV_SPLIT_SIZES[dataset], seed=seed)


def _clean_question(text: str) -> str:
    """Trim and guarantee a trailing question mark."""
    s = text.strip()
    if not s:
        return s
    if not s.endswith("?"):
        s = s.rstrip(".!,;: ") + "?"
    return s


def _qid_sort_key(question_id: str):
    # numeric ids sort numerically, everything else lexicographically after
    if question_id.isdigit():
        return (0, int(question_id), "")
    return (1, 0, question_id)


def _glob_one(path: Path, patterns: list[str]) -> Path:
    for pat in patterns:
        matches = sorted(path.glob(pat))
        if matches:
            return matches[0]
    raise LoadError(f"no file matching {patterns} under {path}")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"ill-formed JSON in {path}: {exc}") from exc


def _load_vqav2(path: Path, split: str, errors: list[str]) -> list[QuestionInstance]:
    qfile = _glob_one(path, [f"*{split}*questions.json"])
    payload = _read_json(qfile)
    questions = payload.get("questions")
    if questions is None:
        raise LoadError(f"{qfile} lacks a 'questions' array")
    subtype = payload.get("data_subtype") or ""

    ann_by_qid: dict = {}
    try:
        afile = _glob_one(path, [f"*{split}*annotations.json"])
    except LoadError:
        afile = None
    if afile is not None:
        ann_payload = _read_json(afile)
        for ann in ann_payload.get("annotations", []):
            ann_by_qid[ann.get("question_id")] = ann

    out = []
    for rec in questions:
        qid = rec.get("question_id")
        image_id = rec.get("image_id")
        question = _clean_question(rec.get("question") or "")
        if qid is None or image_id is None or not question:
            errors.append(f"vqav2 question {qid!r}: missing id, image reference, or text")
            continue
        name = f"COCO_{subtype}_{image_id:012d}.jpg" if subtype else f"{image_id}.jpg"
        image = ImageRef.from_source(image_id, path / "images" / name)
        ann = ann_by_qid.get(qid)
        gold = [a["answer"].lower() for a in ann.get("answers", [])] if ann else []
        out.append(
            QuestionInstance(
                question_id=str(qid),
                image=image,
                question=question,
                task_mode="direct",
                gold_answers=gold,
                answer_type=ann.get("answer_type") if ann else None,
            )
        )
    return out


def _load_aokvqa(path: Path, split: str, errors: list[str]) -> list[QuestionInstance]:
    qfile = _glob_one(path, [f"aokvqa*{split}*.json", f"*{split}*.json"])
    records = _read_json(qfile)
    if not isinstance(records, list):
        raise LoadError(f"{qfile}: expected a top-level list of records")

    out = []
    for rec in records:
        qid = rec.get("question_id")
        image_id = rec.get("image_id")
        question = _clean_question(rec.get("question") or "")
        if qid is None or image_id is None or not question:
            errors.append(f"aokvqa question {qid!r}: missing id, image reference, or text")
            continue
        image = ImageRef.from_source(image_id, path / "images" / f"{int(image_id):012d}.jpg"
                                     if str(image_id).isdigit() else path / "images" / f"{image_id}.jpg")
        choices = rec.get("choices")
        correct = rec.get("correct_choice_idx")
        gold = [a.lower() for a in rec.get("direct_answers") or []]
        # choices without an annotated index (test split) fall back to direct
        if choices is not None and len(choices) == 4 and correct is not None:
            mode = "multiple_choice"
        else:
            mode, choices, correct = "direct", None, None
        out.append(
            QuestionInstance(
                question_id=str(qid),
                image=image,
                question=question,
                task_mode=mode,
                gold_answers=gold,
                choices=list(choices) if choices else None,
                correct_choice_idx=correct,
            )
        )
    return out


def _load_vizwiz(path: Path, split: str, errors: list[str]) -> list[QuestionInstance]:
    qfile = _glob_one(path, [f"{split}.json", f"*{split}*.json"])
    records = _read_json(qfile)
    if not isinstance(records, list):
        raise LoadError(f"{qfile}: expected a top-level list of records")

    out = []
    for rec in records:
        image_name = rec.get("image")
        question = _clean_question(rec.get("question") or "")
        if not image_name or not question:
            errors.append(f"vizwiz record {image_name!r}: missing image reference or question")
            continue
        image = ImageRef.from_source(image_name, path / "images" / image_name)
        # annotator confidence fields are dropped on purpose; the metric
        # only consumes answer strings
        gold = [a["answer"].lower() for a in rec.get("answers") or []]
        out.append(
            QuestionInstance(
                question_id=str(image_name),
                image=image,
                question=question,
                task_mode="direct",
                gold_answers=gold,
                answer_type=rec.get("answer_type"),
            )
        )
    return out


_LOADERS = {"vqav2": _load_vqav2, "aokvqa": _load_aokvqa, "vizwiz": _load_vizwiz}


def load_dataset_with_report(path: str | Path, dataset: str, split: str) -> tuple[list[QuestionInstance], list[str]]:
    """Load one dataset split, returning (instances, per-record errors).

    Instances come back ordered by question id. Records that cannot be
    mapped (e.g. a question without an image reference) are skipped and
    described in the error list; missing or ill-formed files raise
    LoadError instead.
    """
    if dataset not in _LOADERS:
        raise ValueError(f"unknown dataset {dataset!r}; expected one of {DATASETS}")
    root = Path(path)
    if not root.is_dir():
        raise LoadError(f"dataset directory not found: {root}")
    errors: list[str] = []
    instances = _LOADERS[dataset](root, split, errors)
    valid = []
    for inst in instances:
        try:
            inst.validate()
        except ValueError as exc:
            errors.append(f"{dataset} question {inst.question_id!r}: {exc}")
            continue
        valid.append(inst)
    valid.sort(key=lambda i: _qid_sort_key(i.question_id))
    return valid, errors


def load_dataset(path: str | Path, dataset: str, split: str) -> list[QuestionInstance]:
    """Like load_dataset_with_report, logging per-record errors as warnings."""
    instances, errors = load_dataset_with_report(path, dataset, split)
    for err in errors:
        log.warning("skipped record: %s", err)
    return instances


def sample_dev_split(instances: list[QuestionInstance], spec: DevSplitSpec) -> list[QuestionInstance]:
    """Uniform sample without replacement, deterministic for a fixed seed.

    Output preserves the input (dataset) order.
    """
    if spec.sample_size > len(instances):
        raise ValueError(
            f"sample_size {spec.sample_size} exceeds population {len(instances)}"
        )
    rng = random.Random(spec.seed)
    picked = sorted(rng.sample(range(len(instances)), spec.sample_size))
    return [instances[i] for i in picked]


def save_jsonl(instances: list[QuestionInstance], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> list[QuestionInstance]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(QuestionInstance.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise LoadError(f"{path}:{lineno}: bad instance record: {exc}") from exc
    return out
