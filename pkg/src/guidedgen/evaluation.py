"""Automatic metrics: mean oracle score, coverage ratio and BLEU-4."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence as Seq

import numpy as np

from .errors import BenchmarkMismatchError, EvaluationError, UndefinedInputError
from .lm import AutoregressiveModel, ConceptInput, SamplerConfig, sample_sequence, spawn_rngs
from .oracle import SequenceOracle, coverage_ratio, lexical_score
from .text import tokenize

REPORT_SCHEMA = "guidedgen.eval_report/1"
BLEU_ORDER = 4


# --------------------------------------------------------------------------
# BLEU

def _ngrams(tokens: Seq[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Seq[Seq[str]]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def corpus_bleu(candidates: Seq[str], references: Seq[Seq[str]], order: int = BLEU_ORDER) -> float:
    """Corpus BLEU with uniform weights over 1..order-grams.

    Counts are clipped by the maximum count in any single reference.  The
    brevity penalty uses the closest reference length (shorter wins ties).
    A higher order (n >= 2) whose corpus-level match count is zero is
    smoothed to ``1 / (total + 1)``; no unigram match at all gives 0.  Text is lowercased and split into ``[a-z0-9]+`` tokens.
    """
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate is required")
    matches, totals = [0] * order, [0] * order
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise UndefinedInputError("BLEU needs at least one reference")
        c = tokenize(cand)
        rs = [tokenize(r) for r in refs]
        c_len += len(c)
        r_len += _closest_ref_len(len(c), rs)
        for n in range(1, order + 1):
            cand_counts = _ngrams(c, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(k, max_ref[g]) for g, k in cand_counts.items())
            totals[n - 1] += max(len(c) - n + 1, 0)
    if c_len == 0:
        return 0.0
    if matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        if m == 0:
            log_p += math.log(1.0 / (t + 1))
        else:
            log_p += math.log(m / t)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p / order)


def bleu4(candidate: str, references: Seq[str]) -> float:
    if not references:
        raise UndefinedInputError("BLEU needs at least one reference")
    return corpus_bleu([candidate], [list(references)])


# --------------------------------------------------------------------------
# benchmarks and systems

@dataclass(frozen=True)
class BenchEntry:
    x: ConceptInput
    references: tuple[str, ...] = ()


class Benchmark(list):
    """List of :class:`BenchEntry`; references are optional per entry."""

    def fingerprint(self) -> str:
        blob = json.dumps([[list(e.x.concepts), list(e.references)] for e in self], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "Benchmark":
        out = cls()
        with open(path) as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    out.append(BenchEntry(ConceptInput(tuple(d["concepts"])), tuple(d.get("references", ()))))
        if not out:
            raise ValueError(f"benchmark {path} is empty")
        return out

    def save(self, path) -> None:
        with open(path, "w") as f:
            for e in self:
                rec = {"concepts": list(e.x.concepts)}
                if e.references:
                    rec["references"] = list(e.references)
                f.write(json.dumps(rec) + "\n")


class System(Protocol):
    name: str

    def generate(self, x: ConceptInput, rng: np.random.Generator) -> str: ...


@dataclass
class SamplingSystem:
    name: str
    model: AutoregressiveModel
    sampler: SamplerConfig

    def generate(self, x: ConceptInput, rng: np.random.Generator) -> str:
        y = sample_sequence(self.model, x, self.sampler, rng)
        return self.model.vocab.render(y.token_ids)


@dataclass
class EvalReport:
    system: str
    o_score: float
    coverage: float
    bleu4: float | None
    n: int
    benchmark: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = {k: v for k, v in d.items() if k != "schema"}
        return cls(**d)


def evaluate_outputs(name: str, bench: Benchmark, outputs: Seq[str], oracle: SequenceOracle,
                     config: dict | None = None) -> tuple[EvalReport, list[dict]]:
    """Score one output per entry; returns the report and the per-entry dump."""
    if len(outputs) != len(bench):
        raise ValueError(f"{len(outputs)} outputs for {len(bench)} benchmark entries")
    if not bench:
        raise ValueError("empty benchmark")
    rows = []
    for i, (entry, text) in enumerate(zip(bench, outputs)):
        try:
            o = float(oracle.score(entry.x, text))
            cov = coverage_ratio(entry.x, text)
            lex = lexical_score(entry.x, text)
            bleu = bleu4(text, entry.references) if entry.references else None
        except Exception as exc:
            raise EvaluationError(i, exc) from exc
        rows.append({"index": i, "concepts": list(entry.x.concepts), "text": text,
                     "o_score": o, "coverage": cov, "lexical": lex, "bleu4": bleu})
    with_refs = [(r["text"], e.references) for r, e in zip(rows, bench) if e.references]
    corpus = corpus_bleu([t for t, _ in with_refs], [list(r) for _, r in with_refs]) if with_refs else None
    report = EvalReport(
        system=name,
        o_score=float(np.mean([r["o_score"] for r in rows])),
        coverage=float(np.mean([r["coverage"] for r in rows])),
        bleu4=corpus,
        n=len(rows),
        benchmark=bench.fingerprint(),
        config=dict(config or {}),
    )
    return report, rows


def generate_outputs(system: System, bench: Benchmark, seed: int) -> list[str]:
    outputs = []
    for i, (entry, rng) in enumerate(zip(bench, spawn_rngs(seed, len(bench)))):
        try:
            outputs.append(system.generate(entry.x, rng))
        except Exception as exc:
            raise EvaluationError(i, exc) from exc
    return outputs


def evaluate_system(system: System, bench: Benchmark, oracle: SequenceOracle, seed: int,
                    config: dict | None = None) -> tuple[EvalReport, list[dict]]:
    outputs = generate_outputs(system, bench, seed)
    return evaluate_outputs(system.name, bench, outputs, oracle, {"seed": seed, **(config or {})})


# --------------------------------------------------------------------------
# comparison

METRICS = ("o_score", "coverage", "bleu4")


def compare(reports: Seq[EvalReport], baseline: str | None = None) -> list[dict]:
    """Rows of metrics with absolute and relative deltas against ``baseline``."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    benches = {r.benchmark for r in reports}
    if len(benches) != 1:
        raise BenchmarkMismatchError(f"reports cover different benchmarks: {sorted(benches)}")
    base = reports[0] if baseline is None else next((r for r in reports if r.system == baseline), None)
    if base is None:
        raise KeyError(f"no report named {baseline!r}")
    rows = []
    for r in reports:
        row = {"system": r.system, "baseline": base.system}
        for m in METRICS:
            v, b = getattr(r, m), getattr(base, m)
            row[m] = v
            if v is None or b is None:
                row[f"{m}_delta"] = row[f"{m}_rel"] = None
            else:
                row[f"{m}_delta"] = v - b
                row[f"{m}_rel"] = (v - b) / b if b else None
        rows.append(row)
    return rows


def format_table(rows: Seq[dict]) -> str:
    def fmt(v, pct=False):
        if v is None:
            return "/"
        return f"{v:+.1%}" if pct else f"{v:.3f}"
    lines = [f"{'system':<16} {'O score':>8} {'rel':>7} {'coverage':>8} {'rel':>7} {'BLEU4':>6}"]
    for r in rows:
        lines.append(
            f"{r['system']:<16} {fmt(r['o_score']):>8} {fmt(r['o_score_rel'], True):>7} "
            f"{fmt(r['coverage']):>8} {fmt(r['coverage_rel'], True):>7} {fmt(r['bleu4']):>6}"
        )
    return "\n".join(lines)


def paired_t_test(a: Seq[float], b: Seq[float]) -> tuple[float, float]:
    """Two-sided paired Student's t-test on per-entry scores; returns (t, p)."""
    from scipy import stats

    res = stats.ttest_rel(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return float(res.statistic), float(res.pvalue)
