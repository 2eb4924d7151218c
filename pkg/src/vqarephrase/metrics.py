"""Linguistic complexity metrics over dependency parses.

Average dependency distance (ADD) is the mean linear distance between a
token and its head; idea density (ID) is the fraction of verbs, adjectives,
adverbs, adpositions, and conjunctions among the words. Parses are ingested
from CoNLL-U produced by any external parser; punctuation is excluded from
both metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

ID_TAGS = frozenset({"VERB", "ADJ", "ADV", "ADP", "CCONJ", "SCONJ"})


class ConlluError(Exception):
    """Malformed CoNLL-U input."""


@dataclass(frozen=True)
class Token:
    index: int
    form: str
    upos: str
    head: int


@dataclass
class ParsedSentence:
    tokens: list[Token]

    def validate(self) -> None:
        if not self.tokens:
            raise ValueError("sentence must have at least one token")
        n = len(self.tokens)
        for pos, tok in enumerate(self.tokens, start=1):
            if tok.index != pos:
                raise ValueError(f"token indices not contiguous at position {pos}")
            if not 0 <= tok.head <= n:
                raise ValueError(f"head {tok.head} out of range for token {tok.index}")
        roots = sum(1 for tok in self.tokens if tok.head == 0)
        if roots != 1:
            raise ValueError(f"expected exactly one root, found {roots}")


def ingest_conllu(path: str | Path) -> list[ParsedSentence]:
    """Parse a CoNLL-U file into sentences.

    Comment lines, multiword token ranges ("1-2"), and empty nodes ("1.1")
    are skipped; malformed token lines raise ConlluError with the line number.
    """
    sentences: list[ParsedSentence] = []
    current: list[Token] = []

    def flush(lineno: int) -> None:
        nonlocal current
        if not current:
            return
        sent = ParsedSentence(current)
        try:
            sent.validate()
        except ValueError as exc:
            raise ConlluError(f"{path}: sentence ending at line {lineno}: {exc}") from exc
        sentences.append(sent)
        current = []

    with Path(path).open(encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise ConlluError(f"{path}:{lineno}: expected 10 tab-separated columns, got {len(cols)}")
            token_id = cols[0]
            if "-" in token_id or "." in token_id:
                continue
            try:
                index = int(token_id)
                head = int(cols[6])
            except ValueError as exc:
                raise ConlluError(f"{path}:{lineno}: non-integer ID or HEAD column") from exc
            current.append(Token(index=index, form=cols[1], upos=cols[3], head=head))
        flush(lineno + 1)
    return sentences


def add_metric(sentence: ParsedSentence) -> float:
    """Mean |index - head| over non-root, non-punctuation tokens."""
    distances = [
        abs(tok.index - tok.head)
        for tok in sentence.tokens
        if tok.head != 0 and tok.upos != "PUNCT"
    ]
    if not distances:
        return 0.0
    return sum(distances) / len(distances)


def id_metric(sentence: ParsedSentence, count_aux: bool = False) -> float:
    """Fraction of content-structure tags among non-punctuation tokens."""
    tags = ID_TAGS | {"AUX"} if count_aux else ID_TAGS
    words = [tok for tok in sentence.tokens if tok.upos != "PUNCT"]
    if not words:
        return 0.0
    counted = sum(1 for tok in words if tok.upos in tags)
    return counted / len(words)


@dataclass
class ComplexityComparison:
    original_add: float
    original_id: float
    rephrased_add: float
    rephrased_id: float
    original_count: int
    rephrased_count: int

    @property
    def delta_add(self) -> float:
        return self.rephrased_add - self.original_add

    @property
    def delta_id(self) -> float:
        return self.rephrased_id - self.original_id


def compare_complexity(original: list[ParsedSentence],
                       rephrased: list[ParsedSentence],
                       count_aux: bool = False) -> ComplexityComparison:
    """Group means of ADD and ID for original vs rephrased parses."""
    if not original or not rephrased:
        raise ValueError("both parse groups must be non-empty")

    def means(group: list[ParsedSentence]) -> tuple[float, float]:
        adds = [add_metric(s) for s in group]
        ids = [id_metric(s, count_aux) for s in group]
        return sum(adds) / len(adds), sum(ids) / len(ids)

    o_add, o_id = means(original)
    r_add, r_id = means(rephrased)
    return ComplexityComparison(
        original_add=o_add,
        original_id=o_id,
        rephrased_add=r_add,
        rephrased_id=r_id,
        original_count=len(original),
        rephrased_count=len(rephrased),
    )


def write_complexity_csv(cmp: ComplexityComparison, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "sentences", "mean_add", "mean_id"])
        writer.writerow(["original", cmp.original_count, f"{cmp.original_add:.4f}", f"{cmp.original_id:.4f}"])
        writer.writerow(["rephrased", cmp.rephrased_count, f"{cmp.rephrased_add:.4f}", f"{cmp.rephrased_id:.4f}"])
        writer.writerow(["delta", "", f"{cmp.delta_add:.4f}", f"{cmp.delta_id:.4f}"])
