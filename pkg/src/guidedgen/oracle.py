"""Sequence-level oracles: lexical check, coverage ratio and the joint product.

An oracle scores a rendered sentence (tokens joined by spaces, eos dropped)
against the concept input and returns a value in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol

from .errors import UndefinedInputError
from .text import Stemmer, default_stemmer


class SequenceOracle(Protocol):
    def score(self, x, text: str) -> float: ...


def _concepts(constraints) -> list[str]:
    return list(getattr(constraints, "concepts", constraints))


def covered(concept: str, text_stems: set[str], stemmer: Stemmer) -> bool:
    """A concept is covered when every one of its word stems occurs in the text."""
    parts = stemmer.stems(concept)
    return bool(parts) and all(p in text_stems for p in parts)


def lexical_score(constraints: Iterable[str], text: str, stemmer: Stemmer | None = None) -> int:
    stemmer = stemmer or default_stemmer()
    text_stems = set(stemmer.stems(text))
    return int(all(covered(c, text_stems, stemmer) for c in _concepts(constraints)))


def coverage_ratio(constraints: Iterable[str], text: str, stemmer: Stemmer | None = None) -> float:
    concepts = _concepts(constraints)
    if not concepts:
        raise UndefinedInputError("coverage is undefined for an empty constraint list")
    stemmer = stemmer or default_stemmer()
    text_stems = set(stemmer.stems(text))
    return sum(covered(c, text_stems, stemmer) for c in concepts) / len(concepts)


@dataclass(frozen=True)
class LexicalOracle:
    stemmer: Stemmer = field(default_factory=default_stemmer)

    def score(self, x, text: str) -> float:
        return float(lexical_score(x, text, self.stemmer))


@dataclass(frozen=True)
class JointOracle:
    lexical: LexicalOracle
    commonsense: SequenceOracle

    def score(self, x, text: str) -> float:
        return joint_score(self.lexical, self.commonsense, x, text)


def joint_score(lex: LexicalOracle, cs: SequenceOracle, x, text: str) -> float:
    lex_value = lex.score(x, text)
    if lex_value == 0.0:
        return 0.0
    return lex_value * cs.score(x, text)


@dataclass(frozen=True)
class ConstantOracle:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("oracle values must lie in [0, 1]")

    def score(self, x, text: str) -> float:
        return self.value


class TableOracle:
    """Looks the rendered sentence up in a fixed table; for enumeration tests."""

    def __init__(self, values: Mapping[str, float], default: float = 0.0):
        self.values = dict(values)
        self.default = default
        for v in list(self.values.values()) + [default]:
            if not 0.0 <= v <= 1.0:
                raise ValueError("oracle values must lie in [0, 1]")

    def score(self, x, text: str) -> float:
        return self.values.get(text, self.default)


@dataclass(frozen=True)
class ScaledOracle:
    base: SequenceOracle
    factor: float

    def score(self, x, text: str) -> float:
        return self.factor * self.base.score(x, text)
