"""Synthetic instances and a matching mock-backend table for offline runs.

The questions, gold answers, and mock responses are built so that candidate
answers overlap gold answers often enough for utilities to span the whole
{0, 1/3, 2/3, 1} range, which exercises selection and oracle behavior.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .datamodel import ImageRef, QuestionInstance, save_jsonl

_QUESTION_POOL = [
    "What time of day is it?",
    "Does the water have ripples?",
    "What color is the large umbrella?",
    "Why would you use this bag?",
    "What is the man in the red shirt holding?",
    "What is behind the boy?",
    "What will be built here one day?",
    "Which piece of clothing is unique to one person here?",
]

_ANSWER_POOL = ["clock", "2", "yes", "no", "opponent", "red", "water", "suitcase"]

_FUSION_POOL = [
    "What time is on the clock at the top of the building?",
    "Does the water have the small ripples around the boats?",
    "What color is the large umbrella near the bench?",
    "Why would you use this suitcase packed on both sides?",
    "What is the man in the red shirt holding in his hand?",
    "What is behind the boy doing a trick on a skateboard?",
    "it is probably daytime",
    "What will be built at this construction site?",
]

_PARAPHRASE_POOL = [
    "At what time of day was this taken?",
    "Are there ripples on the water?",
    "Which color is the big umbrella?",
    "What would this bag be used for?",
    "What is held by the man in the red shirt?",
    "What can be seen behind the boy?",
]

_CAPTION_POOL = [
    "a tall stone building with a clock tower on a cloudy day",
    "a group of boats docked on calm water",
    "a man in a red shirt standing on a city sidewalk",
]

_ANSWER_TYPES = ["yes/no", "number", "other"]


def make_instances(count: int, seed: int = 0, mc_every: int = 5) -> list[QuestionInstance]:
    """Deterministic synthetic instances; every mc_every-th is multiple choice."""
    rng = random.Random(seed)
    instances = []
    for i in range(count):
        qid = f"q{i:04d}"
        image = ImageRef.from_source(f"img_{i:04d}", f"images/img_{i:04d}.jpg")
        question = _QUESTION_POOL[i % len(_QUESTION_POOL)]
        if mc_every and (i + 1) % mc_every == 0:
            choices = rng.sample(_ANSWER_POOL, 4)
            instances.append(QuestionInstance(
                question_id=qid, image=image, question=question,
                task_mode="multiple_choice", gold_answers=[],
                choices=choices, correct_choice_idx=rng.randrange(4)))
            continue
        primary = rng.choice(_ANSWER_POOL)
        repeats = rng.choice([0, 1, 2, 3, 5, 10])
        gold = [primary] * repeats
        filler = 0
        while len(gold) < 10:
            gold.append(f"filler{filler}")
            filler += 1
        rng.shuffle(gold)
        instances.append(QuestionInstance(
            question_id=qid, image=image, question=question,
            task_mode="direct", gold_answers=gold,
            answer_type=rng.choice(_ANSWER_TYPES)))
    return instances


def make_mock_table() -> dict:
    """Mock table whose rules cover every pipeline stage.

    Rule order matters: requests whose prompt embeds earlier turns must hit
    the most specific rule first.
    """
    return {
        "rules": [
            {"match": "Modified Question:", "responses": list(_FUSION_POOL)},
            {"match": "Paraphrase:", "responses": list(_PARAPHRASE_POOL)},
            {"match": "Which all entities|List up to 3 objects", "responses": [
                "1. clock 2. building",
                "1. water 2. boats",
                "I cannot tell.",
                "umbrella",
            ]},
            {"match": "Explanation:|Explain your answer", "responses": [
                "clocks can tell time, so read the clock to determine the time of day",
                "the ripples form around the docked boats",
                "the umbrella shades the bench from the sun",
            ]},
            {"match": "What can you tell me about", "responses": [
                "it is large and easy to see. it sits near the center of the image.",
                "he is standing on the sidewalk",
                "it is at the top of the building",
            ]},
            {"match": "So which option is your final answer", "responses": ["A.", "B.", "C.", "D."]},
            {"match": "Shorten your answer", "responses": list(_ANSWER_POOL)},
            {"match": "Answer: Option", "responses": ["A", "B", "C", "D"]},
            {"match": "select the correct answer", "responses": [
                "I think the answer is B. the clock reads noon.",
                "The answer is C. it matches the scene.",
            ]},
            {"match": "Short Answer:|only 1 word", "responses": list(_ANSWER_POOL)},
            {"match": "^$", "requires_image": True, "responses": list(_CAPTION_POOL)},
            {"match": "Describe the image", "responses": list(_CAPTION_POOL)},
        ],
        "scores": [
            {"match": "^entailment$", "logprobs": [-0.2]},
            {"match": "^neutral$", "logprobs": [-1.8]},
            {"match": "^contradiction$", "logprobs": [-2.6]},
        ],
    }


def write_bundle(out_dir: str | Path, count: int = 25, seed: int = 0) -> tuple[Path, Path]:
    """Write dataset.jsonl and mock_table.json under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset_path = out / "dataset.jsonl"
    table_path = out / "mock_table.json"
    save_jsonl(make_instances(count, seed=seed), dataset_path)
    table_path.write_text(json.dumps(make_mock_table(), indent=2), encoding="utf-8")
    return dataset_path, table_path
