"""A small synthetic concept-to-sentence world.

Sentences are built from clause templates, one clause per fact:

    CapableOf   the {head} can {tail}
    UsedFor     the {head} is used to {tail}
    AtLocation  the {head} is in the {tail}
    PartOf      the {head} is part of the {tail}

joined by ``and``.  A scene is one or two facts; its concept input is the
set of content words.  The training corpus realises each scene many times
with noise (wrong or swapped fillers, dropped clauses) so that a model
fitted on it makes both commonsense and coverage mistakes.  The knowledge
base holds exactly the sensical facts.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .evaluation import BenchEntry, Benchmark
from .lm import ConceptInput, Vocabulary, make_rng
from .scorer import RelationTuple, RelationType, StaticKB

CAPABLE = {
    "dog": ["run", "bark", "swim", "dig"],
    "cat": ["climb", "sleep", "jump"],
    "bird": ["fly", "sing"],
    "fish": ["swim"],
    "horse": ["run", "jump"],
    "child": ["run", "sing", "read", "jump"],
    "man": ["read", "cook", "drive"],
    "cow": ["eat", "sleep"],
}
USED = {
    "knife": ["cut"],
    "pen": ["write"],
    "cup": ["drink"],
    "broom": ["sweep"],
    "ladder": ["climb"],
    "stove": ["cook"],
    "spoon": ["eat", "stir"],
}
LOCATED = {
    "dog": ["park", "yard", "house"],
    "cat": ["house", "yard"],
    "bird": ["tree", "sky"],
    "fish": ["river", "lake"],
    "horse": ["farm", "field"],
    "child": ["school", "park"],
    "man": ["office", "kitchen"],
    "cow": ["farm", "field"],
    "knife": ["kitchen"],
    "pen": ["office", "school"],
    "cup": ["kitchen"],
    "broom": ["house"],
    "ladder": ["yard"],
    "stove": ["kitchen"],
    "spoon": ["kitchen"],
    "tree": ["park", "yard", "field"],
    "car": ["street", "garage"],
    "book": ["school", "office"],
}
PART = {
    "leaf": ["tree"],
    "branch": ["tree"],
    "wheel": ["car"],
    "door": ["car", "house"],
    "page": ["book"],
    "wing": ["bird"],
    "fin": ["fish"],
    "tail": ["dog", "cat", "cow"],
}
FACTS = {
    RelationType.CapableOf: CAPABLE,
    RelationType.UsedFor: USED,
    RelationType.AtLocation: LOCATED,
    RelationType.PartOf: PART,
}
TEMPLATES = {
    RelationType.CapableOf: "the {h} can {t}",
    RelationType.UsedFor: "the {h} is used to {t}",
    RelationType.AtLocation: "the {h} is in the {t}",
    RelationType.PartOf: "the {h} is part of the {t}",
}
FUNCTION_WORDS = ["the", "can", "is", "used", "to", "in", "part", "of", "and"]


def tail_pool(relation: RelationType) -> list[str]:
    return sorted({t for tails in FACTS[relation].values() for t in tails})


def is_sensical(tup: RelationTuple) -> bool:
    return tup.tail in FACTS[tup.relation].get(tup.head, [])


def realize(facts) -> str:
    return " and ".join(TEMPLATES[f.relation].format(h=f.head, t=f.tail) for f in facts)


def scene_concepts(facts) -> tuple[str, ...]:
    seen: list[str] = []
    for f in facts:
        for w in (f.head, f.tail):
            if w not in seen:
                seen.append(w)
    return tuple(seen)


def all_scenes() -> list[tuple[RelationTuple, ...]]:
    """Single facts, plus every fact paired with a location fact for the same head
    (or for the whole, in the case of PartOf)."""
    scenes = []
    for rel in (RelationType.CapableOf, RelationType.UsedFor, RelationType.PartOf):
        for head, tails in FACTS[rel].items():
            for t in tails:
                fact = RelationTuple(head, rel, t)
                scenes.append((fact,))
                anchor = t if rel is RelationType.PartOf else head
                for loc in LOCATED.get(anchor, []):
                    scenes.append((fact, RelationTuple(anchor, RelationType.AtLocation, loc)))
    return scenes


def world_vocabulary() -> Vocabulary:
    words = set(FUNCTION_WORDS)
    for table in FACTS.values():
        for h, tails in table.items():
            words.add(h)
            words.update(tails)
    return Vocabulary.build(words)


def knowledge_base() -> StaticKB:
    records = []
    for rel, table in FACTS.items():
        for h, tails in table.items():
            for rank, t in enumerate(tails):
                records.append((h, rel.value, t, 1.0 - 0.01 * rank))
    return StaticKB(records)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    sentences_per_scene: int = 20
    p_correct: float = 0.35
    p_alt: float = 0.15      # another sensical filler (coverage lost, still sensical)
    p_nonsense: float = 0.35  # a filler that breaks commonsense (coverage lost)
    p_swap: float = 0.15     # concepts kept but put in a nonsensical role
    p_drop: float = 0.15     # drop one clause of a two-fact scene
    eval_fraction: float = 0.3


@dataclass
class World:
    vocab: Vocabulary
    kb: StaticKB
    corpus: list[tuple[ConceptInput, str, tuple[RelationTuple, ...]]]
    train_inputs: list[ConceptInput]
    eval_bench: Benchmark
    config: WorldConfig = field(default_factory=WorldConfig)

    def corpus_records(self) -> list[tuple[ConceptInput, str]]:
        return [(x, text) for x, text, _ in self.corpus]

    def gold(self) -> list[tuple[str, list[RelationTuple]]]:
        seen, out = set(), []
        for _, text, facts in self.corpus:
            if text not in seen:
                seen.add(text)
                out.append((text, list(facts)))
        return out

    def save(self, directory) -> None:
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "corpus.jsonl", "w") as f:
            for x, text, _ in self.corpus:
                f.write(json.dumps({"concepts": list(x.concepts), "text": text}) + "\n")
        with open(d / "gold.jsonl", "w") as f:
            for text, facts in self.gold():
                f.write(json.dumps({"sentence": text, "tuples": [t.to_dict() for t in facts]}) + "\n")
        with open(d / "train_inputs.jsonl", "w") as f:
            for x in self.train_inputs:
                f.write(json.dumps({"concepts": list(x.concepts)}) + "\n")
        self.kb.save(d / "kb.jsonl")
        self.eval_bench.save(d / "bench.jsonl")


def _corrupt(fact: RelationTuple, scene_nouns: list[str], cfg: WorldConfig,
             rng: np.random.Generator) -> RelationTuple:
    rel = fact.relation
    valid = FACTS[rel].get(fact.head, [])
    alt = [t for t in valid if t != fact.tail]
    wrong = [t for t in tail_pool(rel) if t not in valid]
    probs = np.array([cfg.p_correct, cfg.p_alt if alt else 0.0, cfg.p_nonsense, cfg.p_swap])
    mode = rng.choice(4, p=probs / probs.sum())
    if mode == 0:
        return fact
    if mode == 1:
        return RelationTuple(fact.head, rel, alt[rng.integers(len(alt))])
    if mode == 2:
        return RelationTuple(fact.head, rel, wrong[rng.integers(len(wrong))])
    if rel in (RelationType.AtLocation, RelationType.PartOf):
        return RelationTuple(fact.tail, rel, fact.head)
    others = [n for n in scene_nouns if n != fact.head]
    if not others:
        others = [h for h in LOCATED if h != fact.head]
    return RelationTuple(others[rng.integers(len(others))], rel, fact.tail)


def noisy_realization(facts, cfg: WorldConfig, rng: np.random.Generator) -> tuple[RelationTuple, ...]:
    nouns = [f.tail for f in facts if f.relation in (RelationType.AtLocation, RelationType.PartOf)]
    nouns += [f.head for f in facts]
    out = [_corrupt(f, nouns, cfg, rng) for f in facts]
    if len(out) == 2 and rng.random() < cfg.p_drop:
        out = [out[rng.integers(2)]]
    if len(out) == 2 and rng.random() < 0.5:
        out = out[::-1]
    return tuple(out)


def build_world(cfg: WorldConfig = WorldConfig()) -> World:
    rng = make_rng(cfg.seed)
    scenes = all_scenes()
    corpus = []
    for facts in scenes:
        x = ConceptInput(scene_concepts(facts))
        for _ in range(cfg.sentences_per_scene):
            realized = noisy_realization(facts, cfg, rng)
            corpus.append((x, realize(realized), realized))
    order = rng.permutation(len(scenes))
    n_eval = int(round(cfg.eval_fraction * len(scenes)))
    eval_idx, train_idx = sorted(order[:n_eval]), sorted(order[n_eval:])
    train_inputs = [ConceptInput(scene_concepts(scenes[i])) for i in train_idx]
    bench = Benchmark()
    for i in eval_idx:
        facts = scenes[i]
        refs = sorted({realize(p) for p in itertools.permutations(facts)})
        bench.append(BenchEntry(ConceptInput(scene_concepts(facts)), tuple(refs)))
    return World(world_vocabulary(), knowledge_base(), corpus, train_inputs, bench, cfg)
