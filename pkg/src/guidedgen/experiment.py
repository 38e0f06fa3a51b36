"""Desk-scale rerun of the base / CS-guided / Joint-guided comparison.

Builds the synthetic world, fits a concept-conditioned trigram base model,
self-samples training data, trains one predictor per oracle and evaluates the
three systems on the held-out concept sets.

    python -m guidedgen.experiment --seed 0
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import dataclass, field

from .evaluation import Benchmark, BenchEntry, SamplingSystem, compare, evaluate_system, format_table
from .lm import SamplerConfig, ToyModel
from .nado import GuidedModel, NeuralR, concept_lexicon, TrainConfig, TrainingExample, generate_training_set, train
from .oracle import JointOracle, LexicalOracle
from .scorer import ScorerConfig, commonsense_oracle
from .world import WorldConfig, build_world

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    order: int = 3
    smoothing: float = 0.01
    self_sampler: SamplerConfig = SamplerConfig(top_p=0.95, temperature=0.7, max_len=16, seed=11)
    decoder: SamplerConfig = SamplerConfig(top_k=30, temperature=0.7, max_len=16, seed=23)
    train: TrainConfig = TrainConfig(lam=0.5, learning_rate=0.2, epochs=200, samples_per_input=16,
                                     seed=5, batch_size=16)
    scorer: ScorerConfig = ScorerConfig()
    hidden: tuple[int, int] = (64, 64)
    predictor_seed: int = 3
    eval_repeats: int = 10


def run(cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    t0 = time.perf_counter()
    world = build_world(cfg.world)
    base = ToyModel.fit(world.corpus_records(), world.vocab, cfg.order, cfg.smoothing)
    cs = commonsense_oracle(world.kb, cfg.scorer)
    joint = JointOracle(LexicalOracle(), cs)

    samples = generate_training_set(base, cs, world.train_inputs, cfg.train, cfg.self_sampler)
    joint_samples = [
        TrainingExample(ex.x, ex.y, joint.score(ex.x, world.vocab.render(ex.y.token_ids)))
        for ex in samples
    ]
    lexicon = concept_lexicon(world.vocab)

    predictors, traces = {}, {}
    for name, data in (("cs", samples), ("joint", joint_samples)):
        R0 = NeuralR(world.vocab, lexicon, cfg.decoder.max_len, cfg.hidden, cfg.predictor_seed)
        predictors[name], traces[name] = train(R0, data, base, cfg.train)

    bench = Benchmark(
        BenchEntry(e.x, e.references) for e in world.eval_bench for _ in range(cfg.eval_repeats)
    )
    systems = [
        SamplingSystem("base", base, cfg.decoder),
        SamplingSystem("guided-cs", GuidedModel(base, predictors["cs"]), cfg.decoder),
        SamplingSystem("guided-joint", GuidedModel(base, predictors["joint"]), cfg.decoder),
    ]
    reports, dumps = [], {}
    for system in systems:
        report, rows = evaluate_system(system, bench, cs, cfg.decoder.seed)
        reports.append(report)
        dumps[system.name] = rows
    rows = compare(reports, baseline="base")
    return {
        "reports": reports,
        "rows": rows,
        "entries": dumps,
        "traces": traces,
        "n_corpus": len(world.corpus),
        "n_train_examples": len(samples),
        "n_params": predictors["cs"].n_params,
        "seconds": time.perf_counter() - t0,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="world seed")
    ap.add_argument("--json", action="store_true", help="print reports as JSON")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    cfg = ExperimentConfig(world=WorldConfig(seed=args.seed))
    out = run(cfg)
    if args.json:
        print(json.dumps([r.to_dict() for r in out["reports"]], indent=2))
    else:
        print(format_table(out["rows"]))
        print(f"corpus {out['n_corpus']} sentences, {out['n_train_examples']} self-samples, "
              f"{out['n_params']} predictor parameters, {out['seconds']:.1f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
