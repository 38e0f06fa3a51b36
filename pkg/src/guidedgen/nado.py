"""Token-level guidance from a sequence-level oracle.

``R(x, prefix)`` is the expected oracle score of a completion of ``prefix``
drawn from the base model.  Reweighting the base next-token distribution by
``R(x, prefix + v)`` and renormalising yields the guided model whose sequence
distribution is ``p(y) * O(x, y) / Z``.

Two predictors implement ``R``: :class:`ExactR` enumerates completions and
is only feasible for tiny vocabularies, :class:`NeuralR` is a small
feed-forward network trained on base-model samples.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Protocol, Sequence as Seq

import numpy as np

from .errors import EnumerationBudgetError, GuidedGenError, TrainingDivergedError
from .lm import (
    DEFAULT_ENUM_BUDGET,
    AutoregressiveModel,
    ConceptInput,
    SamplerConfig,
    Sequence,
    Vocabulary,
    make_rng,
    next_distribution,
    sample_sequence,
    spawn_rngs,
)
from .oracle import SequenceOracle
from .text import stem_set, stems

log = logging.getLogger(__name__)

PREDICTOR_SCHEMA = "guidedgen.nado_predictor/1"
PROB_EPS = 1e-12


class RPredictor(Protocol):
    def r_values(self, x: ConceptInput, prefix: tuple[int, ...]) -> np.ndarray: ...

    def r_empty(self, x: ConceptInput) -> float: ...


# --------------------------------------------------------------------------
# exact expectation by enumeration

class ExactR:
    """Expected oracle score by exhaustive expansion of the completion tree.

    Values are memoised per (input, prefix); the tree below any prefix is
    expanded at most once.
    """

    def __init__(self, model: AutoregressiveModel, oracle: SequenceOracle, max_len: int,
                 budget: int = DEFAULT_ENUM_BUDGET):
        V = len(model.vocab)
        if V**max_len > budget:
            raise EnumerationBudgetError(f"|V|^max_len = {V}^{max_len} exceeds budget {budget}")
        self.model, self.oracle, self.max_len = model, oracle, max_len
        self._memo: dict[tuple[ConceptInput, tuple[int, ...]], float] = {}

    def value(self, x: ConceptInput, prefix: Seq[int]) -> float:
        prefix = tuple(prefix)
        key = (x, prefix)
        v = self._memo.get(key)
        if v is not None:
            return v
        vocab = self.model.vocab
        if (prefix and prefix[-1] == vocab.eos_id) or len(prefix) >= self.max_len:
            v = float(self.oracle.score(x, vocab.render(prefix)))
        else:
            p = next_distribution(self.model, x, prefix)
            v = 0.0
            for tok in range(len(vocab)):
                v += p[tok] * self.value(x, prefix + (tok,))
        self._memo[key] = v
        return v

    def r_values(self, x: ConceptInput, prefix: tuple[int, ...]) -> np.ndarray:
        prefix = tuple(prefix)
        return np.array([self.value(x, prefix + (v,)) for v in range(len(self.model.vocab))])

    def r_empty(self, x: ConceptInput) -> float:
        return self.value(x, ())


def exact_r(model: AutoregressiveModel, oracle: SequenceOracle, x: ConceptInput,
            prefix: Seq[int], max_len: int, budget: int = DEFAULT_ENUM_BUDGET) -> float:
    return ExactR(model, oracle, max_len, budget).value(x, prefix)


@dataclass
class ConstantR:
    """``R`` identically equal to ``value``; guidance then leaves ``p`` unchanged."""

    vocab_size: int
    value: float = 1.0

    def r_values(self, x, prefix) -> np.ndarray:
        return np.full(self.vocab_size, self.value)

    def r_empty(self, x) -> float:
        return self.value


# --------------------------------------------------------------------------
# guided distribution

def _reweight(p: np.ndarray, r_next: np.ndarray) -> tuple[np.ndarray, bool]:
    w = np.asarray(r_next, dtype=np.float64) * np.asarray(p, dtype=np.float64)
    mass = w.sum()
    if mass > 0:
        return w / mass, False
    return np.array(p, dtype=np.float64), True


def guided_distribution(p: np.ndarray, r_next: np.ndarray, r_prev: float | None = None) -> np.ndarray:
    """``q(v) ∝ r_next[v] * p(v)``; falls back to ``p`` when the weighted mass is zero.

    ``r_prev`` is the predictor's value for the current prefix.  It divides
    every entry equally and drops out under normalisation.
    """
    r_next = np.asarray(r_next, dtype=np.float64)
    if np.any(r_next < 0) or np.any(r_next > 1):
        raise ValueError("r_next entries must lie in [0, 1]")
    return _reweight(p, r_next)[0]


class GuidedModel:
    """Base model reweighted token by token by an ``R`` predictor."""

    def __init__(self, base: AutoregressiveModel, predictor: RPredictor):
        self.base = base
        self.predictor = predictor
        self.vocab = base.vocab
        self.fallbacks = 0

    def next_distribution(self, x: ConceptInput, prefix: tuple[int, ...]) -> np.ndarray:
        p = self.base.next_distribution(x, prefix)
        q, fell_back = _reweight(p, self.predictor.r_values(x, prefix))
        if fell_back:
            self.fallbacks += 1
            log.debug("zero guided mass after prefix %s; using base distribution", prefix)
        return q


def guided_sample(guided: GuidedModel, x: ConceptInput, sampler: SamplerConfig,
                  rng: np.random.Generator) -> Sequence:
    return sample_sequence(guided, x, sampler, rng)


# --------------------------------------------------------------------------
# training data

@dataclass(frozen=True)
class TrainingExample:
    x: ConceptInput
    y: Sequence
    label: float

    def __post_init__(self):
        if not 0.0 <= self.label <= 1.0:
            raise ValueError("labels must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    learning_rate: float = 1e-2
    epochs: int = 10
    samples_per_input: int = 16
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1 or self.samples_per_input < 1 or self.batch_size < 1:
            raise ValueError("epochs, samples_per_input and batch_size must be positive")


def generate_training_set(model: AutoregressiveModel, oracle: SequenceOracle,
                          inputs: Seq[ConceptInput], cfg: TrainConfig,
                          sampler: SamplerConfig) -> list[TrainingExample]:
    """``samples_per_input`` base-model samples per input, each labelled by the oracle.

    Every input gets its own RNG stream spawned from ``sampler.seed``, so the
    result does not depend on processing order.
    """
    out: list[TrainingExample] = []
    dropped = 0
    for x, rng in zip(inputs, spawn_rngs(sampler.seed, len(inputs))):
        for _ in range(cfg.samples_per_input):
            y = sample_sequence(model, x, sampler, rng)
            try:
                label = float(oracle.score(x, model.vocab.render(y.token_ids)))
            except GuidedGenError as exc:
                dropped += 1
                log.warning("oracle failed on a sample for %s: %s", x.concepts, exc)
                continue
            out.append(TrainingExample(x, y, label))
    if dropped:
        log.warning("dropped %d samples after oracle failures", dropped)
    return out


def save_training_set(examples: Iterable[TrainingExample], vocab: Vocabulary, path) -> None:
    with open(path, "w") as f:
        for ex in examples:
            rec = {
                "concepts": list(ex.x.concepts),
                "tokens": [vocab.tokens[i] for i in ex.y.token_ids],
                "o_score": ex.label,
            }
            f.write(json.dumps(rec) + "\n")


def load_training_set(path, vocab: Vocabulary) -> list[TrainingExample]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                y = Sequence.of(vocab.encode(d["tokens"]), vocab)
                out.append(TrainingExample(ConceptInput(tuple(d["concepts"])), y, float(d["o_score"])))
    return out


# --------------------------------------------------------------------------
# losses, generic over any predictor

def _clip(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce(pred: float, label: float) -> float:
    pred = float(_clip(pred))
    return -(label * math.log(pred) + (1.0 - label) * math.log(1.0 - pred))


def bernoulli_kl(a: float, b: float) -> float:
    a, b = float(_clip(a)), float(_clip(b))
    return a * math.log(a / b) + (1.0 - a) * math.log((1.0 - a) / (1.0 - b))


def step_predictions(R: RPredictor, ex: TrainingExample) -> list[float]:
    """``R(x, y_{<=i})`` for i = 0..T (the empty prefix first)."""
    ids = ex.y.token_ids
    preds = [R.r_empty(ex.x)]
    for i, tok in enumerate(ids):
        preds.append(float(R.r_values(ex.x, ids[:i])[tok]))
    return preds


def ce_loss(R: RPredictor, ex: TrainingExample) -> float:
    """Binary cross entropy against the sequence label, summed over steps 0..T."""
    return sum(bce(r, ex.label) for r in step_predictions(R, ex))


def reg_loss(R: RPredictor, model: AutoregressiveModel, ex: TrainingExample) -> float:
    """Summed Bernoulli KL between ``sum_v R(prefix+v) p(v)`` and ``R(prefix)``."""
    ids = ex.y.token_ids
    total = 0.0
    prev = R.r_empty(ex.x)
    for i, tok in enumerate(ids):
        r_next = R.r_values(ex.x, ids[:i])
        p = next_distribution(model, ex.x, ids[:i])
        total += bernoulli_kl(float(np.dot(r_next, p)), prev)
        prev = float(r_next[tok])
    return total


# --------------------------------------------------------------------------
# neural approximator

def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def concept_lexicon(vocab: Vocabulary) -> set[str]:
    """Stems of every non-eos vocabulary word: the default concept feature set."""
    return stem_set(t for t in vocab.tokens if t != vocab.eos)


class NeuralR:
    """Two tanh hidden layers over hand-built features, sigmoid outputs.

    Features of ``(x, prefix)``, concatenated in this order:
      concept stems (multi-hot over ``concept_lexicon``), bag of prefix tokens
      (counts over the vocabulary), one-hot of the last and of the
      second-to-last prefix token (vocabulary plus a start slot), prefix
      length divided by ``max_len``.
    The vocabulary head gives ``R(x, prefix + v)`` for every ``v``; a scalar
    head on the same hidden state gives ``R(x, empty prefix)``.
    """

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "we", "be")

    def __init__(self, vocab: Vocabulary, concept_lexicon: Iterable[str], max_len: int,
                 hidden: tuple[int, int] = (64, 64), seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.vocab = vocab
        self.concept_lexicon = tuple(sorted(set(concept_lexicon)))
        self._stem_index = {s: i for i, s in enumerate(self.concept_lexicon)}
        self.max_len = int(max_len)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        V, S = len(vocab), len(self.concept_lexicon)
        self.input_dim = S + V + 2 * (V + 1) + 1
        if params is None:
            params = self._init_params(make_rng(self.seed))
        self.params = {k: np.array(params[k], dtype=np.float64) for k in self.PARAM_NAMES}

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        D, (H1, H2), V = self.input_dim, self.hidden, len(self.vocab)
        return {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(D), (D, H1)),
            "b1": np.zeros(H1),
            "W2": rng.normal(0.0, 1.0 / math.sqrt(H1), (H1, H2)),
            "b2": np.zeros(H2),
            "W3": rng.normal(0.0, 1.0 / math.sqrt(H2), (H2, V)),
            "b3": np.zeros(V),
            "we": rng.normal(0.0, 1.0 / math.sqrt(H2), H2),
            "be": np.zeros(1),
        }

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "NeuralR":
        return NeuralR(self.vocab, self.concept_lexicon, self.max_len, self.hidden, self.seed,
                       {k: v.copy() for k, v in self.params.items()})

    # features -------------------------------------------------------------

    def concept_features(self, x: ConceptInput) -> np.ndarray:
        f = np.zeros(len(self.concept_lexicon))
        for c in x.concepts:
            for s in stems(c):
                i = self._stem_index.get(s)
                if i is not None:
                    f[i] = 1.0
        return f

    def features(self, x: ConceptInput, prefixes: Seq[Seq[int]]) -> np.ndarray:
        V, S = len(self.vocab), len(self.concept_lexicon)
        out = np.zeros((len(prefixes), self.input_dim))
        out[:, :S] = self.concept_features(x)
        bag0, last0, second0, len_col = S, S + V, S + 2 * V + 1, self.input_dim - 1
        for r, prefix in enumerate(prefixes):
            for tok in prefix:
                out[r, bag0 + tok] += 1.0
            out[r, last0 + (prefix[-1] if len(prefix) >= 1 else V)] = 1.0
            out[r, second0 + (prefix[-2] if len(prefix) >= 2 else V)] = 1.0
            out[r, len_col] = len(prefix) / self.max_len
        return out

    # forward ----------------------------------------------------------------

    def _forward(self, phi: np.ndarray):
        P = self.params
        h1 = np.tanh(phi @ P["W1"] + P["b1"])
        h2 = np.tanh(h1 @ P["W2"] + P["b2"])
        z = h2 @ P["W3"] + P["b3"]
        ze = h2 @ P["we"] + P["be"][0]
        return h1, h2, z, ze

    def r_values(self, x: ConceptInput, prefix: tuple[int, ...]) -> np.ndarray:
        _, _, z, _ = self._forward(self.features(x, [tuple(prefix)]))
        return _sigmoid(z[0])

    def r_empty(self, x: ConceptInput) -> float:
        _, _, _, ze = self._forward(self.features(x, [()]))
        return float(_sigmoid(ze[0]))

    # persistence ------------------------------------------------------------

    def to_dict(self, train_config: TrainConfig | None = None, loss_trace=None) -> dict:
        return {
            "schema": PREDICTOR_SCHEMA,
            "feature_map": {
                "features": ["concept_stems", "prefix_bag", "last_token", "second_last_token", "length"],
                "tokens": list(self.vocab.tokens),
                "eos_id": self.vocab.eos_id,
                "concept_lexicon": list(self.concept_lexicon),
                "max_len": self.max_len,
            },
            "layers": [self.input_dim, *self.hidden, len(self.vocab)],
            "activation": "tanh",
            "output": "sigmoid",
            "seed": self.seed,
            "n_params": self.n_params,
            "params": {k: self.params[k].tolist() for k in self.PARAM_NAMES},
            "train_config": asdict(train_config) if train_config is not None else None,
            "loss_trace": list(loss_trace) if loss_trace is not None else [],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeuralR":
        if d.get("schema") != PREDICTOR_SCHEMA:
            raise ValueError(f"unsupported predictor schema {d.get('schema')!r}")
        fm = d["feature_map"]
        vocab = Vocabulary(tuple(fm["tokens"]), int(fm["eos_id"]))
        return cls(vocab, fm["concept_lexicon"], fm["max_len"], tuple(d["layers"][1:3]),
                   d.get("seed", 0), d["params"])

    def save(self, path, train_config: TrainConfig | None = None, loss_trace=None) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(train_config, loss_trace), f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "NeuralR":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class _Batch:
    phi: np.ndarray            # (rows, D) features, one row per prefix y_{<i}
    probs: np.ndarray          # (rows, V) base distribution after each prefix
    step_row: np.ndarray       # CE/KL step i>=1 -> its prefix row
    step_tok: np.ndarray       # realised token y_i
    step_label: np.ndarray
    step_prev_row: np.ndarray  # row holding R(y_{<=i-1}); -1 means the empty head
    step_prev_tok: np.ndarray
    step_example: np.ndarray
    empty_row: np.ndarray      # per example, the row of the empty prefix
    empty_label: np.ndarray


@dataclass
class _Prepared:
    phi: np.ndarray
    probs: np.ndarray
    tokens: np.ndarray
    label: float


def prepare(R: NeuralR, model: AutoregressiveModel, ex: TrainingExample) -> _Prepared:
    ids = ex.y.token_ids
    prefixes = [ids[:i] for i in range(len(ids))]
    phi = R.features(ex.x, prefixes)
    probs = np.stack([next_distribution(model, ex.x, pr) for pr in prefixes])
    return _Prepared(phi, probs, np.array(ids, dtype=np.int64), ex.label)


def _collate(items: Seq[_Prepared]) -> _Batch:
    phi, probs = [], []
    step_row, step_tok, step_label, prev_row, prev_tok, step_ex = [], [], [], [], [], []
    empty_row, empty_label = [], []
    offset = 0
    for e, it in enumerate(items):
        T = len(it.tokens)
        phi.append(it.phi)
        probs.append(it.probs)
        empty_row.append(offset)
        empty_label.append(it.label)
        rows = offset + np.arange(T)
        step_row.append(rows)
        step_tok.append(it.tokens)
        step_label.append(np.full(T, it.label))
        prev_row.append(np.concatenate([[-1], rows[:-1]]))
        prev_tok.append(np.concatenate([[0], it.tokens[:-1]]))
        step_ex.append(np.full(T, e))
        offset += T
    cat = np.concatenate
    return _Batch(cat(phi), cat(probs), cat(step_row), cat(step_tok), cat(step_label),
                  cat(prev_row).astype(np.int64), cat(prev_tok).astype(np.int64),
                  cat(step_ex), np.array(empty_row), np.array(empty_label))


def _loss_and_grad(R: NeuralR, batch: _Batch, lam: float, want_grad: bool = True):
    P = R.params
    h1, h2, z, ze_all = R._forward(batch.phi)
    out = _sigmoid(z)

    # empty-prefix head, one per example
    ze = ze_all[batch.empty_row]
    ce_empty = _softplus(ze) - batch.empty_label * ze

    # CE on the realised token of every step
    z_step = z[batch.step_row, batch.step_tok]
    ce_steps = _softplus(z_step) - batch.step_label * z_step
    ce = ce_empty.sum() + ce_steps.sum()

    # consistency KL between aggregated prediction and the previous prediction
    a = np.clip(np.einsum("rv,rv->r", out[batch.step_row], batch.probs[batch.step_row]),
                PROB_EPS, 1.0 - PROB_EPS)
    from_empty = batch.step_prev_row < 0
    zb = np.where(from_empty, ze[batch.step_example],
                  z[np.maximum(batch.step_prev_row, 0), batch.step_prev_tok])
    log_b, log_1mb = -_softplus(-zb), -_softplus(zb)
    kl = a * (np.log(a) - log_b) + (1 - a) * (np.log1p(-a) - log_1mb)
    reg = kl.sum()
    loss = ce + lam * reg
    if not want_grad:
        return loss, ce, reg, None

    dz = np.zeros_like(z)
    np.add.at(dz, (batch.step_row, batch.step_tok), _sigmoid(z_step) - batch.step_label)
    dze = np.zeros(len(batch.empty_row))
    dze += _sigmoid(ze) - batch.empty_label

    if lam:
        b = _sigmoid(zb)
        d_a = lam * (np.log(a) - np.log1p(-a) - zb)          # dKL/da
        d_zb = lam * (b - a)                                  # dKL/dlogit(b)
        dout = np.zeros_like(z)
        np.add.at(dout, batch.step_row, d_a[:, None] * batch.probs[batch.step_row])
        dz += dout * out * (1 - out)
        np.add.at(dze, batch.step_example[from_empty], d_zb[from_empty])
        keep = ~from_empty
        np.add.at(dz, (batch.step_prev_row[keep], batch.step_prev_tok[keep]), d_zb[keep])

    g = {}
    h2e = h2[batch.empty_row]
    g["W3"] = h2.T @ dz
    g["b3"] = dz.sum(0)
    g["we"] = h2e.T @ dze
    g["be"] = np.array([dze.sum()])
    dh2 = dz @ P["W3"].T
    np.add.at(dh2, batch.empty_row, dze[:, None] * P["we"][None, :])
    da2 = dh2 * (1 - h2**2)
    g["W2"] = h1.T @ da2
    g["b2"] = da2.sum(0)
    da1 = (da2 @ P["W2"].T) * (1 - h1**2)
    g["W1"] = batch.phi.T @ da1
    g["b1"] = da1.sum(0)
    return loss, ce, reg, g


def loss_and_grad(R: NeuralR, examples: Seq[TrainingExample], model: AutoregressiveModel,
                  lam: float) -> tuple[float, dict[str, np.ndarray]]:
    """Summed ``CE + lam * KL`` over ``examples`` and its gradient."""
    batch = _collate([prepare(R, model, ex) for ex in examples])
    loss, _, _, g = _loss_and_grad(R, batch, lam)
    return float(loss), g


def grad_check(R: NeuralR, example: TrainingExample, model: AutoregressiveModel, lam: float,
               n_params: int = 50, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of the analytic gradient against central differences.

    ``n_params`` coordinates are drawn uniformly without replacement from the
    flattened parameter vector.  The relative error of a coordinate is
    ``|g - fd| / max(|g|, |fd|)``, taken as zero when both vanish.
    """
    batch = _collate([prepare(R, model, example)])
    _, _, _, g = _loss_and_grad(R, batch, lam)
    sizes = [R.params[k].size for k in R.PARAM_NAMES]
    total = sum(sizes)
    rng = make_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(bounds, flat, side="right") - 1)
        name = R.PARAM_NAMES[which]
        arr = R.params[name].reshape(-1)
        j = flat - bounds[which]
        old = arr[j]
        arr[j] = old + h
        fp = _loss_and_grad(R, batch, lam, want_grad=False)[0]
        arr[j] = old - h
        fm = _loss_and_grad(R, batch, lam, want_grad=False)[0]
        arr[j] = old
        fd = (fp - fm) / (2 * h)
        an = g[name].reshape(-1)[j]
        denom = max(abs(an), abs(fd))
        if denom > 0:
            worst = max(worst, abs(an - fd) / denom)
    return worst


def train(R: NeuralR, dataset: Seq[TrainingExample], model: AutoregressiveModel,
          cfg: TrainConfig) -> tuple[NeuralR, list[dict]]:
    """Mini-batch gradient descent with a fixed step on the mean per-example loss.

    Returns a trained copy (``R`` is left untouched) and one trace entry per
    epoch with the mean per-example total, CE and KL losses seen during it.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    R = R.copy()
    prepared = [prepare(R, model, ex) for ex in dataset]
    rng = make_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        tot = ce_sum = reg_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = _collate([prepared[i] for i in idx])
            loss, ce, reg, g = _loss_and_grad(R, batch, cfg.lam)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            scale = cfg.learning_rate / len(idx)
            for k in R.PARAM_NAMES:
                R.params[k] -= scale * g[k]
            tot, ce_sum, reg_sum = tot + loss, ce_sum + ce, reg_sum + reg
        n = len(prepared)
        trace.append({"epoch": epoch + 1, "loss": tot / n, "ce": ce_sum / n, "reg": reg_sum / n})
        log.info("epoch %d loss %.5f ce %.5f reg %.5f", epoch + 1, tot / n, ce_sum / n, reg_sum / n)
    return R, trace
