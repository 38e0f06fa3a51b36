"""Tokenizer and suffix stemmer shared by the oracles and the embedder.

The rule table lives in ``data/stemmer.json`` so other implementations can
reproduce token-for-token output.  Rules are tried in file order; the first
rule whose suffix matches, whose stem-ending condition holds and whose
remaining stem has at least ``min_stem`` characters fires, and stemming
stops there (one pass, at most one suffix removed).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable


@dataclass(frozen=True)
class SuffixRule:
    suffix: str
    stem_endings: tuple[str, ...] = ()
    forbidden_stem_endings: tuple[str, ...] = ()

    def apply(self, word: str, min_stem: int) -> str | None:
        if not word.endswith(self.suffix):
            return None
        stem = word[: len(word) - len(self.suffix)]
        if len(stem) < min_stem:
            return None
        if self.stem_endings and not stem.endswith(self.stem_endings):
            return None
        if self.forbidden_stem_endings and stem.endswith(self.forbidden_stem_endings):
            return None
        return stem


@dataclass(frozen=True)
class Stemmer:
    rules: tuple[SuffixRule, ...]
    min_stem: int = 3
    token_pattern: str = "[a-z0-9]+"
    lowercase: bool = True

    @classmethod
    def from_dict(cls, cfg: dict) -> "Stemmer":
        rules = tuple(
            SuffixRule(
                r["suffix"],
                tuple(r.get("stem_endings", ())),
                tuple(r.get("forbidden_stem_endings", ())),
            )
            for r in cfg["rules"]
        )
        return cls(
            rules=rules,
            min_stem=int(cfg.get("min_stem", 3)),
            token_pattern=cfg.get("token_pattern", "[a-z0-9]+"),
            lowercase=bool(cfg.get("lowercase", True)),
        )

    @classmethod
    def from_file(cls, path) -> "Stemmer":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def stem(self, word: str) -> str:
        if self.lowercase:
            word = word.lower()
        for rule in self.rules:
            out = rule.apply(word, self.min_stem)
            if out is not None:
                return out
        return word

    def tokenize(self, text: str) -> list[str]:
        if self.lowercase:
            text = text.lower()
        return re.findall(self.token_pattern, text)

    def stems(self, text: str) -> list[str]:
        return [self.stem(w) for w in self.tokenize(text)]


@lru_cache(maxsize=1)
def default_stemmer() -> Stemmer:
    raw = resources.files("guidedgen").joinpath("data/stemmer.json").read_text()
    return Stemmer.from_dict(json.loads(raw))


def stem(word: str) -> str:
    """Stem one word with the shipped rule table."""
    return default_stemmer().stem(word)


def tokenize(text: str) -> list[str]:
    return default_stemmer().tokenize(text)


def stems(text: str) -> list[str]:
    return default_stemmer().stems(text)


def stem_set(texts: Iterable[str]) -> set[str]:
    out: set[str] = set()
    for t in texts:
        out.update(stems(t))
    return out
