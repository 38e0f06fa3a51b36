"""Vocabulary, sequences, the frozen base-model contract and a toy n-gram model.

Randomness everywhere in the package comes from numpy's PCG64 bit generator
(``numpy.random.Generator(PCG64(seed))``).  Independent streams for parallel
work are derived with ``numpy.random.SeedSequence(seed).spawn(n)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence as Seq

import numpy as np

from .errors import ContractViolation, EnumerationBudgetError
from .text import stems

EOS = "</s>"
BOS_ID = -1
GLOBAL_KEY = "*"
MODEL_SCHEMA = "guidedgen.toy_model/1"
DIST_ATOL = 1e-9
GREEDY_TEMPERATURE = 1e-6
DEFAULT_ENUM_BUDGET = 10**6


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError(f"eos_id {self.eos_id} out of range")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, words: Iterable[str], eos: str = EOS) -> "Vocabulary":
        """Sorted distinct words followed by the eos token."""
        uniq = sorted(set(words) - {eos})
        return cls(tuple(uniq) + (eos,), len(uniq))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> str:
        return self.tokens[self.eos_id]

    def index(self, token: str) -> int:
        return self._index[token]

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self._index[w] for w in words]

    def render(self, ids: Iterable[int]) -> str:
        """Tokens joined by single spaces with eos dropped."""
        return " ".join(self.tokens[i] for i in ids if i != self.eos_id)


@dataclass(frozen=True)
class ConceptInput:
    """The constraint: an ordered list of concept strings."""

    concepts: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        if not self.concepts:
            raise ValueError("a concept input needs at least one concept")
        seen = set()
        for c in self.concepts:
            if not c or not c.strip():
                raise ValueError("concepts must be non-empty strings")
            k = " ".join(stems(c))
            if k in seen:
                raise ValueError(f"duplicate concept after stemming: {c!r}")
            seen.add(k)
        object.__setattr__(self, "_key", "|".join(sorted(seen)))

    @property
    def key(self) -> str:
        """Order-free canonical key of the concept set (sorted stemmed forms)."""
        return self._key

    def __iter__(self):
        return iter(self.concepts)

    def __len__(self) -> int:
        return len(self.concepts)


@dataclass(frozen=True)
class Sequence:
    token_ids: tuple[int, ...]
    terminated: bool

    @classmethod
    def of(cls, ids: Iterable[int], vocab: Vocabulary) -> "Sequence":
        ids = tuple(int(i) for i in ids)
        for i in ids:
            if not 0 <= i < len(vocab):
                raise ContractViolation(f"token id {i} outside vocabulary")
        n_eos = ids.count(vocab.eos_id)
        if n_eos > 1 or (n_eos == 1 and ids[-1] != vocab.eos_id):
            raise ContractViolation("eos may only appear once, as the last token")
        return cls(ids, n_eos == 1)

    def __len__(self) -> int:
        return len(self.token_ids)


class AutoregressiveModel(Protocol):
    vocab: Vocabulary

    def next_distribution(self, x: ConceptInput, prefix: tuple[int, ...]) -> np.ndarray: ...


def check_distribution(probs: np.ndarray, size: int | None = None) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or (size is not None and probs.shape[0] != size):
        raise ContractViolation(f"distribution has shape {probs.shape}, expected ({size},)")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ContractViolation("distribution has negative or non-finite entries")
    if abs(probs.sum() - 1.0) > DIST_ATOL:
        raise ContractViolation(f"distribution sums to {probs.sum()!r}")
    return probs


def _check_prefix(vocab: Vocabulary, prefix: Seq[int]) -> tuple[int, ...]:
    prefix = tuple(int(t) for t in prefix)
    if vocab.eos_id in prefix:
        raise ContractViolation("cannot query the next token after eos")
    for t in prefix:
        if not 0 <= t < len(vocab):
            raise ContractViolation(f"token id {t} outside vocabulary")
    return prefix


def next_distribution(model: AutoregressiveModel, x: ConceptInput, prefix: Seq[int]) -> np.ndarray:
    """Validated next-step distribution of ``model`` after ``prefix``."""
    prefix = _check_prefix(model.vocab, prefix)
    return check_distribution(model.next_distribution(x, prefix), len(model.vocab))


def _normalize_rows(counts: np.ndarray, smoothing: float) -> np.ndarray:
    row = counts + smoothing
    return row / row.sum()


class ToyModel:
    """n-gram table model conditioned on the concept set.

    Rows are looked up under the concept-set key first and fall back to the
    concept-agnostic table (key ``"*"``), then to the uniform distribution for
    contexts never seen in training.  The beginning of the sequence is padded
    with ``BOS_ID`` (-1), which is not a vocabulary entry.
    """

    def __init__(self, vocab: Vocabulary, order: int, smoothing: float,
                 tables: dict[str, dict[tuple[int, ...], np.ndarray]]):
        if order not in (1, 2, 3):
            raise ValueError("order must be 1, 2 or 3")
        self.vocab = vocab
        self.order = order
        self.smoothing = float(smoothing)
        self.tables = {}
        for key, rows in tables.items():
            frozen = {}
            for ctx, row in rows.items():
                row = np.array(row, dtype=np.float64)
                check_distribution(row, len(vocab))
                row.setflags(write=False)
                frozen[tuple(ctx)] = row
            self.tables[key] = frozen
        uniform = np.full(len(vocab), 1.0 / len(vocab))
        uniform.setflags(write=False)
        self._uniform = uniform

    def context(self, prefix: tuple[int, ...]) -> tuple[int, ...]:
        return _context(self.order, prefix)

    def next_distribution(self, x: ConceptInput, prefix: tuple[int, ...]) -> np.ndarray:
        ctx = self.context(prefix)
        rows = self.tables.get(x.key)
        if rows is not None and ctx in rows:
            return rows[ctx]
        rows = self.tables.get(GLOBAL_KEY)
        if rows is not None and ctx in rows:
            return rows[ctx]
        return self._uniform

    @classmethod
    def uniform(cls, vocab: Vocabulary) -> "ToyModel":
        return cls(vocab, 1, 0.0, {})

    @classmethod
    def fit(cls, records: Iterable[tuple[ConceptInput, str]], vocab: Vocabulary,
            order: int = 2, smoothing: float = 0.01) -> "ToyModel":
        """Count n-grams over whitespace tokens, one table per concept set plus a shared one."""
        counts: dict[str, dict[tuple[int, ...], np.ndarray]] = {GLOBAL_KEY: {}}
        n_records = 0
        for x, text in records:
            n_records += 1
            ids = vocab.encode(text.split()) + [vocab.eos_id]
            per_set = counts.setdefault(x.key, {})
            prefix: list[int] = []
            for tok in ids:
                ctx = _context(order, prefix)
                for table in (per_set, counts[GLOBAL_KEY]):
                    row = table.get(ctx)
                    if row is None:
                        row = table[ctx] = np.zeros(len(vocab))
                    row[tok] += 1.0
                prefix.append(tok)
        if n_records == 0:
            raise ValueError("empty corpus")
        tables = {k: {ctx: _normalize_rows(c, smoothing) for ctx, c in rows.items()}
                  for k, rows in counts.items()}
        return cls(vocab, order, smoothing, tables)

    @classmethod
    def random(cls, vocab: Vocabulary, order: int, rng: np.random.Generator,
               concentration: float = 1.0) -> "ToyModel":
        """Dirichlet rows for every context in the shared table."""
        n = order - 1
        symbols = [BOS_ID] + [i for i in range(len(vocab)) if i != vocab.eos_id]
        contexts = [()]
        for _ in range(n):
            contexts = [c + (s,) for c in contexts for s in symbols]
        # BOS may only appear as left padding
        contexts = [c for c in contexts if _bos_is_prefix_padding(c)]
        rows = {c: rng.dirichlet(np.full(len(vocab), concentration)) for c in contexts}
        for c, row in rows.items():
            row[:] = np.maximum(row, 1e-12)
            row /= row.sum()
        return cls(vocab, order, 0.0, {GLOBAL_KEY: rows})

    def to_dict(self) -> dict:
        def ctx_str(ctx):
            return " ".join("<s>" if t == BOS_ID else self.vocab.tokens[t] for t in ctx)
        return {
            "schema": MODEL_SCHEMA,
            "tokens": list(self.vocab.tokens),
            "eos_id": self.vocab.eos_id,
            "order": self.order,
            "smoothing": self.smoothing,
            "tables": {
                key: {ctx_str(ctx): row.tolist() for ctx, row in sorted(rows.items())}
                for key, rows in sorted(self.tables.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModel":
        if d.get("schema") != MODEL_SCHEMA:
            raise ValueError(f"unsupported model schema {d.get('schema')!r}")
        vocab = Vocabulary(tuple(d["tokens"]), int(d["eos_id"]))

        def parse_ctx(s):
            return tuple(BOS_ID if w == "<s>" else vocab.index(w) for w in s.split())
        tables = {key: {parse_ctx(c): np.array(row) for c, row in rows.items()}
                  for key, rows in d["tables"].items()}
        return cls(vocab, int(d["order"]), float(d["smoothing"]), tables)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ToyModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _context(order: int, prefix: Seq[int]) -> tuple[int, ...]:
    n = order - 1
    if n == 0:
        return ()
    return ((BOS_ID,) * n + tuple(prefix))[-n:]


def _bos_is_prefix_padding(ctx: tuple[int, ...]) -> bool:
    seen_token = False
    for t in ctx:
        if t == BOS_ID and seen_token:
            return False
        seen_token = seen_token or t != BOS_ID
    return True


@dataclass(frozen=True)
class SamplerConfig:
    top_p: float = 1.0
    top_k: int | None = None  # None means "all"
    temperature: float = 1.0
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be positive or None")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def greedy(self) -> bool:
        return self.temperature <= GREEDY_TEMPERATURE


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def sampling_distribution(probs: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Apply temperature, then top-k / top-p truncation, then renormalize.

    Candidates are ranked by probability with ties going to the lower index.
    The nucleus is the shortest ranked prefix whose mass reaches ``top_p``;
    the kept set is the intersection with the ``top_k`` best.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if cfg.greedy:
        out = np.zeros_like(probs)
        out[int(np.argmax(probs))] = 1.0
        return out
    if cfg.temperature != 1.0:
        with np.errstate(divide="ignore"):
            logits = np.log(probs) / cfg.temperature
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    keep = len(probs) if cfg.top_k is None else min(cfg.top_k, len(probs))
    if cfg.top_p < 1.0:
        cum = np.cumsum(probs[order])
        n_nucleus = int(np.searchsorted(cum, cfg.top_p - 1e-12, side="left")) + 1
        keep = min(keep, n_nucleus)
    out = np.zeros_like(probs)
    kept = order[:keep]
    out[kept] = probs[kept]
    return out / out.sum()


def draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from one uniform variate."""
    cum = np.cumsum(probs)
    u = rng.random() * cum[-1]
    idx = int(np.searchsorted(cum, u, side="right"))
    # guard against u landing on the total due to rounding
    idx = min(idx, len(probs) - 1)
    while probs[idx] == 0.0:
        idx -= 1
    return idx


def sample_sequence(model: AutoregressiveModel, x: ConceptInput, cfg: SamplerConfig,
                    rng: np.random.Generator) -> Sequence:
    vocab = model.vocab
    ids: list[int] = []
    while len(ids) < cfg.max_len:
        p = next_distribution(model, x, ids)
        tok = draw(sampling_distribution(p, cfg), rng)
        ids.append(tok)
        if tok == vocab.eos_id:
            return Sequence(tuple(ids), True)
    # force-terminated at max_len
    return Sequence(tuple(ids), False)


def sequence_log_prob(model: AutoregressiveModel, x: ConceptInput, y: Sequence | Seq[int]) -> float:
    ids = y.token_ids if isinstance(y, Sequence) else tuple(y)
    total = 0.0
    for t, tok in enumerate(ids):
        p = next_distribution(model, x, ids[:t])[tok]
        total += math.log(p) if p > 0 else -math.inf
    return total


def enumerate_sequences(model: AutoregressiveModel, x: ConceptInput, max_len: int,
                        budget: int = DEFAULT_ENUM_BUDGET) -> list[tuple[Sequence, float]]:
    """Every complete sequence up to ``max_len`` with its probability.

    Complete means eos-terminated, or force-terminated at ``max_len``.
    Leaves come out in lexicographic order of token ids.
    """
    V = len(model.vocab)
    if V**max_len > budget:
        raise EnumerationBudgetError(f"|V|^max_len = {V}^{max_len} exceeds budget {budget}")
    eos = model.vocab.eos_id
    out: list[tuple[Sequence, float]] = []

    def expand(prefix: tuple[int, ...], prob: float):
        p = next_distribution(model, x, prefix)
        for v in range(V):
            child = prefix + (v,)
            if v == eos:
                out.append((Sequence(child, True), prob * p[v]))
            elif len(child) == max_len:
                out.append((Sequence(child, False), prob * p[v]))
            else:
                expand(child, prob * p[v])

    expand((), 1.0)
    return out


def corpus_perplexity(model: AutoregressiveModel, records: Iterable[tuple[ConceptInput, str]]) -> float:
    """Per-token perplexity, eos included as a predicted token."""
    nll, n = 0.0, 0
    vocab = model.vocab
    for x, text in records:
        ids = vocab.encode(text.split()) + [vocab.eos_id]
        nll -= sequence_log_prob(model, x, ids)
        n += len(ids)
    return math.exp(nll / n)
