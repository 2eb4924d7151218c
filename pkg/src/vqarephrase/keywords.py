"""Keyword phrase extraction over question text.

Candidate phrases are maximal runs of non-stopword, non-punctuation tokens.
Each phrase instance adds its token count once to the degree of every
distinct word it contains, and every token occurrence counts toward its
word's frequency. A word scores degree/frequency; a phrase scores the sum
of its tokens' word scores (duplicated tokens count per occurrence).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

# words keep internal hyphens; any other non-word character is a boundary
_TOKEN_RE = re.compile(r"[^\W_]+(?:-[^\W_]+)*|[^\w\s]|_")
_BOUNDARY = "|"


@dataclass(frozen=True)
class PhraseScore:
    phrase: str
    score: float


@dataclass
class KeywordResult:
    """Phrases ordered by non-increasing score, ties by first occurrence."""

    phrases: list[PhraseScore] = field(default_factory=list)

    def top_phrases(self, k: int) -> list[str]:
        return [p.phrase for p in self.phrases[:k]]


def load_stoplist(path: str | Path | None = None) -> frozenset[str]:
    """Read a stoplist file: one token per line, '#' starts a comment."""
    if path is None:
        return _default_stoplist()
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.split("#", 1)[0].strip().lower()
        if word:
            words.add(word)
    return frozenset(words)


@lru_cache(maxsize=1)
def _default_stoplist() -> frozenset[str]:
    text = resources.files("vqarephrase.data").joinpath("stopwords.txt").read_text("utf-8")
    words = set()
    for line in text.splitlines():
        word = line.split("#", 1)[0].strip().lower()
        if word:
            words.add(word)
    return frozenset(words)


def _tokenize(text: str) -> list[str]:
    out = []
    for match in _TOKEN_RE.finditer(text.lower()):
        token = match.group()
        out.append(token if token[0].isalnum() else _BOUNDARY)
    return out


def _candidate_phrases(tokens: list[str], stoplist: frozenset[str]) -> list[list[str]]:
    phrases: list[list[str]] = []
    current: list[str] = []
    for token in tokens:
        if token == _BOUNDARY or token in stoplist:
            if current:
                phrases.append(current)
                current = []
        else:
            current.append(token)
    if current:
        phrases.append(current)
    return phrases


def extract_keywords(question: str, stoplist: frozenset[str] | set[str] | None = None) -> KeywordResult:
    """Extract scored keyword phrases from a question.

    Deterministic and case-insensitive; an all-stopword question yields an
    empty result.
    """
    if not question:
        raise ValueError("question must be non-empty")
    stop = frozenset(stoplist) if stoplist is not None else _default_stoplist()

    phrases = _candidate_phrases(_tokenize(question), stop)
    if not phrases:
        return KeywordResult([])

    degree: dict[str, int] = {}
    freq: dict[str, int] = {}
    for phrase in phrases:
        for word in set(phrase):
            degree[word] = degree.get(word, 0) + len(phrase)
        for word in phrase:
            freq[word] = freq.get(word, 0) + 1

    word_score = {w: degree[w] / freq[w] for w in freq}

    seen: dict[str, tuple[float, int]] = {}
    for position, phrase in enumerate(phrases):
        text = " ".join(phrase)
        if text in seen:
            continue
        seen[text] = (sum(word_score[w] for w in phrase), position)

    ordered = sorted(seen.items(), key=lambda item: (-item[1][0], item[1][1]))
    return KeywordResult([PhraseScore(text, score) for text, (score, _) in ordered])
