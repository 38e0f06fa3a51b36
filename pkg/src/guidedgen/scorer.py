"""Reference-free commonsense scorer.

A sentence is parsed into (head, relation, tail) tuples; each tuple is
compared with the tails a knowledge base proposes for its head and relation,
and the per-tuple compatibilities are aggregated into one sentence score.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Protocol, Sequence

import numpy as np

from . import external
from .errors import UndefinedInputError
from .text import stems

log = logging.getLogger(__name__)


class RelationType(str, enum.Enum):
    AtLocation = "AtLocation"
    UsedFor = "UsedFor"
    CapableOf = "CapableOf"
    PartOf = "PartOf"


@dataclass(frozen=True)
class RelationTuple:
    head: str
    relation: RelationType
    tail: str

    def __post_init__(self):
        object.__setattr__(self, "relation", RelationType(self.relation))
        if not self.head.strip() or not self.tail.strip():
            raise ValueError("tuple head and tail must be non-empty")

    def to_dict(self) -> dict:
        return {"head": self.head, "relation": self.relation.value, "tail": self.tail}

    @classmethod
    def from_dict(cls, d: dict) -> "RelationTuple":
        return cls(d["head"], RelationType(d["relation"]), d["tail"])


class TupleExtractor(Protocol):
    def extract(self, sentence: str) -> list[RelationTuple]: ...


# --------------------------------------------------------------------------
# rule-based extraction

_DET = r"(?:(?:the|a|an|his|her|their|its|my|our|your) )?"
_CLAUSE_RULES = [
    (RelationType.PartOf, re.compile(rf"^{_DET}(?P<head>.+?) (?:is|are) part of {_DET}(?P<tail>.+)$")),
    (RelationType.UsedFor, re.compile(rf"^{_DET}(?P<head>.+?) (?:is|are) used (?:to|for) (?P<tail>.+)$")),
    (RelationType.AtLocation, re.compile(rf"^{_DET}(?P<head>.+?) (?:is|are) (?:in|at|on) {_DET}(?P<tail>.+)$")),
    (RelationType.CapableOf, re.compile(rf"^{_DET}(?P<head>.+?) can (?P<tail>.+)$")),
]
_PAST_CLAUSE = re.compile(r"^(?:the|a|an) (?P<head>[a-z0-9]+) (?P<verb>[a-z]+)(?: (?P<rest>.+))?$")
_WANT_CLAUSE = re.compile(r"^(?:he|she|they|it) (?:wanted|wants|want) to (?P<tail>.+)$")
_CLAUSE_BREAKS = {"and", "because", "while", "but", "so"}
IRREGULAR_PAST = {
    "ran": "run", "ate": "eat", "went": "go", "saw": "see", "flew": "fly", "swam": "swim",
    "sang": "sing", "drank": "drink", "wrote": "write", "sat": "sit", "stood": "stand",
    "threw": "throw", "caught": "catch", "took": "take", "made": "make", "drove": "drive",
}


def _base_verb(word: str) -> str | None:
    if word in IRREGULAR_PAST:
        return IRREGULAR_PAST[word]
    if word.endswith("ied") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith("ed") and len(word) > 4:
        return word[:-2]
    return None


def split_clauses(sentence: str) -> list[str]:
    """Lowercased word clauses split at punctuation and clause-joining words."""
    clauses, current = [], []
    for chunk in re.split(r"[,;:.!?]", sentence.lower()):
        for w in re.findall(r"[a-z0-9]+", chunk):
            if w in _CLAUSE_BREAKS:
                if current:
                    clauses.append(" ".join(current))
                current = []
            else:
                current.append(w)
        if current:
            clauses.append(" ".join(current))
        current = []
    return clauses


@dataclass(frozen=True)
class RuleBasedExtractor:
    """Pattern grammar over clauses.

    Clause forms recognised (determiners optional unless noted):
      ``X can Y`` -> CapableOf(X, Y);  ``X is used to|for Y`` -> UsedFor(X, Y);
      ``X is in|at|on Y`` -> AtLocation(X, Y);  ``X is part of Y`` -> PartOf(X, Y);
      ``the X <past verb> [rest]`` -> CapableOf(X, base-verb rest);
      ``he|she|they wanted to Y`` -> CapableOf(previous subject, Y).
    """

    def extract(self, sentence: str) -> list[RelationTuple]:
        out: list[RelationTuple] = []
        subject = None
        for clause in split_clauses(sentence):
            tup = None
            for relation, pattern in _CLAUSE_RULES:
                m = pattern.match(clause)
                if m:
                    tup = RelationTuple(m["head"], relation, m["tail"])
                    break
            if tup is None:
                m = _WANT_CLAUSE.match(clause)
                if m and subject is not None:
                    tup = RelationTuple(subject, RelationType.CapableOf, m["tail"])
            if tup is None:
                m = _PAST_CLAUSE.match(clause)
                if m and (base := _base_verb(m["verb"])) is not None:
                    tail = base if m["rest"] is None else f"{base} {m['rest']}"
                    tup = RelationTuple(m["head"], RelationType.CapableOf, tail)
            if tup is not None:
                out.append(tup)
                subject = tup.head
        return out


class ExternalExtractorClient:
    """LLM extractor behind a request/response contract with fixture replay."""

    def __init__(self, store: external.FixtureStore,
                 transport: Callable[[dict], str] | None = None, prompt: str | None = None):
        self.store = store
        self.transport = transport
        self.prompt = external.extraction_prompt() if prompt is None else prompt

    def extract(self, sentence: str) -> list[RelationTuple]:
        request = external.build_extraction_request(sentence, self.prompt)
        raw = self.store.fetch(request, self.transport)
        triples = external.parse_extraction_response(raw)
        lowered = sentence.lower()

        def position(t):
            i = lowered.find(t[0].lower())
            return i if i >= 0 else len(lowered)
        # stable sort keeps the response order among tuples sharing a head
        triples = sorted(triples, key=position)
        return [RelationTuple(h, RelationType(r), t) for h, r, t in triples]


def extract_tuples(extractor: TupleExtractor, sentence: str) -> list[RelationTuple]:
    if not sentence.strip():
        raise UndefinedInputError("cannot extract tuples from an empty sentence")
    return list(extractor.extract(sentence))


# --------------------------------------------------------------------------
# knowledge bases

class KnowledgeBase(Protocol):
    def tails(self, head: str, relation: RelationType, k: int) -> list[str]: ...


def _norm_head(head: str) -> str:
    return " ".join(stems(head))


class StaticKB:
    """Weighted tuple store; tails ranked by weight, ties by tail string."""

    def __init__(self, records: Iterable[tuple[str, str, str, float]] = ()):
        best: dict[tuple[str, str], dict[str, float]] = {}
        for head, relation, tail, weight in records:
            rel = RelationType(relation).value
            slot = best.setdefault((_norm_head(head), rel), {})
            slot[tail] = max(float(weight), slot.get(tail, -math.inf))
        self._ranked = {
            key: [t for t, _ in sorted(tails.items(), key=lambda kv: (-kv[1], kv[0]))]
            for key, tails in best.items()
        }
        self._records = sorted(
            (h, r, t, w) for (h, r), tails in best.items() for t, w in tails.items()
        )

    def tails(self, head: str, relation: RelationType, k: int) -> list[str]:
        return self._ranked.get((_norm_head(head), RelationType(relation).value), [])[:k]

    def __len__(self) -> int:
        return len(self._records)

    def all_tails(self) -> list[str]:
        return sorted({r[2] for r in self._records})

    def all_heads(self) -> list[str]:
        return sorted({r[0] for r in self._records})

    @classmethod
    def load(cls, path) -> "StaticKB":
        records = []
        with open(path) as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    records.append((d["head"], d["relation"], d["tail"], d.get("weight", 1.0)))
        return cls(records)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for h, r, t, w in self._records:
                f.write(json.dumps({"head": h, "relation": r, "tail": t, "weight": w}) + "\n")


class ExternalCometClient:
    """Generative knowledge base behind ``{head, relation, k} -> [tails]``."""

    def __init__(self, store: external.FixtureStore, transport: Callable[[dict], list] | None = None):
        self.store = store
        self.transport = transport

    def tails(self, head: str, relation: RelationType, k: int) -> list[str]:
        request = external.build_kb_request(head, RelationType(relation).value, k)
        return external.parse_kb_response(self.store.fetch(request, self.transport), k)


# --------------------------------------------------------------------------
# embedding and scoring

class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


class BagOfStemsEmbedder:
    """L2-normalised stem counts over a fixed lexicon; unknown stems are dropped."""

    def __init__(self, lexicon: Iterable[str]):
        self.lexicon = tuple(sorted(set(lexicon)))
        self._index = {s: i for i, s in enumerate(self.lexicon)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "BagOfStemsEmbedder":
        lex: set[str] = set()
        for t in texts:
            lex.update(stems(t))
        return cls(lex)

    @property
    def dim(self) -> int:
        return len(self.lexicon)

    def embed(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for s in stems(text):
            i = self._index.get(s)
            if i is not None:
                v[i] += 1.0
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class AggregationMode(str, enum.Enum):
    Min = "min"
    Mean = "mean"


@dataclass(frozen=True)
class ScorerConfig:
    beam_k: int = 8
    aggregation: AggregationMode = AggregationMode.Mean
    empty_tuple_score: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "aggregation", AggregationMode(self.aggregation))
        if self.beam_k < 1:
            raise ValueError("beam_k must be positive")
        if not 0.0 <= self.empty_tuple_score <= 1.0:
            raise ValueError("empty_tuple_score must lie in [0, 1]")


class CompatResult(NamedTuple):
    value: float
    n_candidates: int
    no_candidates: bool


def compat_detail(tup: RelationTuple, kb: KnowledgeBase, emb: Embedder, k: int) -> CompatResult:
    if k < 1:
        raise ValueError("k must be positive")
    candidates = kb.tails(tup.head, tup.relation, k)
    if not candidates:
        log.debug("no knowledge-base tails for (%s, %s)", tup.head, tup.relation.value)
        return CompatResult(0.0, 0, True)
    target = emb.embed(tup.tail)
    # negative cosines are clamped to zero before taking the max
    best = max(max(cosine(target, emb.embed(c)), 0.0) for c in candidates)
    return CompatResult(min(best, 1.0), len(candidates), False)


def compat(tup: RelationTuple, kb: KnowledgeBase, emb: Embedder, k: int) -> float:
    """Best clamped cosine between the tuple's tail and the top-k knowledge-base tails."""
    return compat_detail(tup, kb, emb, k).value


def aggregate(values: Sequence[float], mode: AggregationMode, empty: float) -> float:
    if not values:
        return empty
    if AggregationMode(mode) is AggregationMode.Min:
        return float(min(values))
    return float(sum(values) / len(values))


@dataclass(frozen=True)
class ScoreDetail:
    score: float
    tuples: tuple[RelationTuple, ...]
    compat: tuple[float, ...]
    no_candidates: int


def score_detail(cfg: ScorerConfig, extractor: TupleExtractor, kb: KnowledgeBase,
                 emb: Embedder, sentence: str) -> ScoreDetail:
    tuples = tuple(extract_tuples(extractor, sentence)) if sentence.strip() else ()
    results = [compat_detail(t, kb, emb, cfg.beam_k) for t in tuples]
    values = tuple(r.value for r in results)
    return ScoreDetail(
        aggregate(values, cfg.aggregation, cfg.empty_tuple_score),
        tuples, values, sum(r.no_candidates for r in results),
    )


def o_score(cfg: ScorerConfig, extractor: TupleExtractor, kb: KnowledgeBase,
            emb: Embedder, sentence: str) -> float:
    return score_detail(cfg, extractor, kb, emb, sentence).score


class CommonsenseOracle:
    """The O-score as a sequence oracle. Results are memoised per sentence."""

    def __init__(self, cfg: ScorerConfig, extractor: TupleExtractor, kb: KnowledgeBase, emb: Embedder):
        self.cfg, self.extractor, self.kb, self.emb = cfg, extractor, kb, emb
        self._cache: dict[str, float] = {}

    def score(self, x, text: str) -> float:
        v = self._cache.get(text)
        if v is None:
            v = self._cache[text] = o_score(self.cfg, self.extractor, self.kb, self.emb, text)
        return v


def commonsense_oracle(kb: StaticKB, cfg: ScorerConfig = ScorerConfig(),
                       extractor: TupleExtractor | None = None) -> CommonsenseOracle:
    """O-score oracle with a bag-of-stems embedder over the KB's tail lexicon."""
    emb = BagOfStemsEmbedder.from_texts(kb.all_tails())
    return CommonsenseOracle(cfg, extractor or RuleBasedExtractor(), kb, emb)

# --------------------------------------------------------------------------
# extractor evaluation

def _tuple_tokens(t: RelationTuple) -> list[str]:
    return stems(t.head) + stems(t.tail)


def tuple_overlap(a: RelationTuple, b: RelationTuple) -> float:
    """Shared stem count over the longer of the two head+tail token lists."""
    ta, tb = Counter(_tuple_tokens(a)), Counter(_tuple_tokens(b))
    denom = max(sum(ta.values()), sum(tb.values()))
    if denom == 0:
        return 0.0
    return sum((ta & tb).values()) / denom


def tuple_match(predicted: RelationTuple, gold: RelationTuple) -> bool:
    return predicted.relation == gold.relation and tuple_overlap(predicted, gold) > 0.5


def _prf(tp: int, n_pred: int, n_gold: int) -> dict:
    if n_pred == 0 and n_gold == 0:
        # nothing to find and nothing claimed
        p = r = f = 1.0
    else:
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_gold if n_gold else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"precision": p, "recall": r, "f1": f, "tp": tp, "n_pred": n_pred, "n_gold": n_gold}


def greedy_matches(predicted: Sequence[RelationTuple], gold: Sequence[RelationTuple]) -> list[tuple[int, int]]:
    """One-to-one matching, highest-overlap pairs first, ties by index."""
    pairs = [
        (-tuple_overlap(p, g), i, j)
        for i, p in enumerate(predicted) for j, g in enumerate(gold) if tuple_match(p, g)
    ]
    used_p, used_g, out = set(), set(), []
    for _, i, j in sorted(pairs):
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            out.append((i, j))
    return out


def extractor_f1(extractor: TupleExtractor, gold_set: Sequence[tuple[str, Sequence[RelationTuple]]]) -> dict:
    """Per-relation and micro-averaged precision/recall/F1."""
    if not gold_set:
        raise UndefinedInputError("gold set is empty")
    counts = {r: [0, 0, 0] for r in RelationType}
    for sentence, gold in gold_set:
        predicted = extract_tuples(extractor, sentence)
        for i, j in greedy_matches(predicted, gold):
            counts[predicted[i].relation][0] += 1
        for p in predicted:
            counts[p.relation][1] += 1
        for g in gold:
            counts[g.relation][2] += 1
    report = {r.value: _prf(*counts[r]) for r in RelationType}
    totals = [sum(c[i] for c in counts.values()) for i in range(3)]
    report["overall"] = _prf(*totals)
    return report


def load_gold(path) -> list[tuple[str, list[RelationTuple]]]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append((d["sentence"], [RelationTuple.from_dict(t) for t in d["tuples"]]))
    return out
