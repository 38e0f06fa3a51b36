"""Command-line entry point.

Every command reads and writes line-delimited JSON artifacts.  Options can
come from ``--config FILE`` (a flat JSON object keyed by option name, with
dashes or underscores) and are overridden by flags given on the command
line.  The resolved options are written to ``<output>.config.json``.
Summaries go to stdout, diagnostics to stderr.

Exit status: 0 on success, 1 on a run-time error (bad input files, replay
misses, diverged training, ...), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import urllib.request
from pathlib import Path

from . import __version__
from .errors import GuidedGenError, TransportError
from .evaluation import Benchmark, EvalReport, compare, evaluate_outputs, format_table
from .external import FixtureStore
from .lm import ConceptInput, SamplerConfig, ToyModel, Vocabulary, corpus_perplexity, \
    sample_sequence, spawn_rngs
from .nado import ConstantR, ExactR, GuidedModel, NeuralR, TrainConfig, concept_lexicon, \
    load_training_set, train
from .oracle import JointOracle, LexicalOracle
from .scorer import (ExternalCometClient, ExternalExtractorClient, RelationType, RuleBasedExtractor,
                     ScorerConfig, StaticKB, commonsense_oracle, extract_tuples)

log = logging.getLogger("guidedgen")

CONFIG_SCHEMA = "guidedgen.run_config/1"
REQUIRED = object()  # marks options that must come from a flag or the config file


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# option handling

class _Command:
    def __init__(self, sub, name: str, help: str, func, outputs: tuple[str, ...] = ("out",)):
        self.parser = sub.add_parser(name, help=help, description=help,
                                     argument_default=argparse.SUPPRESS)
        self.parser.set_defaults(_command=self)
        self.name, self.func, self.outputs = name, func, outputs
        self.defaults: dict[str, object] = {}
        self.parser.add_argument("--config", help="JSON file of option values")

    def opt(self, flag: str, default=REQUIRED, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        self.parser.add_argument(flag, dest=dest, **kw)
        return self

    def resolve(self, ns: argparse.Namespace) -> dict:
        opts = dict(self.defaults)
        if getattr(ns, "config", None):
            with open(ns.config) as f:
                cfg = json.load(f)
            if not isinstance(cfg, dict):
                raise UsageError(f"{ns.config}: config must be a JSON object")
            cfg = {k.replace("-", "_"): v for k, v in cfg.items() if k != "schema"}
            cfg.pop("command", None)
            unknown = sorted(set(cfg) - set(opts))
            if unknown:
                raise UsageError(f"{ns.config}: unknown option(s) for {self.name}: {', '.join(unknown)}")
            opts.update(cfg)
        opts.update({k: v for k, v in vars(ns).items() if k in opts})
        missing = sorted(k for k, v in opts.items() if v is REQUIRED)
        if missing:
            raise UsageError("missing required option(s): "
                             + ", ".join("--" + k.replace("_", "-") for k in missing))
        return opts

    def write_config(self, opts: dict) -> None:
        public = {k: v for k, v in opts.items() if not k.startswith("_")}
        record = {"schema": CONFIG_SCHEMA, "command": self.name, "version": __version__, **public}
        for key in self.outputs:
            out = opts.get(key)
            if out:
                with open(str(out) + ".config.json", "w") as f:
                    json.dump(record, f, indent=2, sort_keys=True)
                    f.write("\n")


def _sampler_opts(cmd: _Command, top_p=1.0, top_k=None, temperature=1.0, max_len=16) -> None:
    cmd.opt("--top-p", top_p, type=float, help=f"nucleus mass (default {top_p})")
    cmd.opt("--top-k", top_k, type=int, help=f"keep the k most likely tokens (default {top_k or 'all'})")
    cmd.opt("--temperature", temperature, type=float, help=f"softmax temperature; <=1e-6 is greedy (default {temperature})")
    cmd.opt("--max-len", max_len, type=int, help=f"maximum tokens including eos (default {max_len})")
    cmd.opt("--seed", type=int, help="RNG seed (required)")


def _sampler(opts: dict) -> SamplerConfig:
    return SamplerConfig(top_p=opts["top_p"], top_k=opts["top_k"], temperature=opts["temperature"],
                         max_len=opts["max_len"], seed=opts["seed"])


def _scorer_opts(cmd: _Command) -> None:
    cmd.opt("--kb", None, help="StaticKB JSONL file")
    cmd.opt("--kb-fixtures", None, help="fixture file for the external knowledge base")
    cmd.opt("--extractor", "rule", choices=["rule", "external"], help="tuple extractor (default rule)")
    cmd.opt("--fixtures", None, help="fixture file for the external extractor")
    cmd.opt("--mode", "replay", choices=["replay", "record", "live"], help="fixture mode (default replay)")
    cmd.opt("--endpoint", None, help="HTTP endpoint for record/live modes")
    cmd.opt("--beam-k", 8, type=int, help="knowledge-base tails per query (default 8)")
    cmd.opt("--aggregation", "mean", choices=["mean", "min"], help="tuple score aggregation (default mean)")
    cmd.opt("--empty-score", 0.5, type=float, help="score of a sentence with no tuples (default 0.5)")


def _http_transport(endpoint: str | None):
    if endpoint is None:
        return None

    def send(request: dict):
        data = json.dumps(request).encode()
        req = urllib.request.Request(endpoint, data=data, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=60) as resp:
                body = json.loads(resp.read())
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        return body["response"] if isinstance(body, dict) and "response" in body else body
    return send


def _stores(opts: dict) -> list[FixtureStore]:
    return [s for s in (opts.get("_extract_store"), opts.get("_kb_store")) if s is not None]


def _extractor(opts: dict):
    if opts["extractor"] == "rule":
        return RuleBasedExtractor()
    if not opts["fixtures"]:
        raise UsageError("--extractor external needs --fixtures")
    store = FixtureStore(opts["fixtures"], opts["mode"])
    opts["_extract_store"] = store
    return ExternalExtractorClient(store, _http_transport(opts["endpoint"]))


def _knowledge_base(opts: dict):
    if opts["kb"]:
        return StaticKB.load(opts["kb"])
    if opts["kb_fixtures"]:
        store = FixtureStore(opts["kb_fixtures"], opts["mode"])
        opts["_kb_store"] = store
        return ExternalCometClient(store, _http_transport(opts["endpoint"]))
    raise UsageError("a knowledge base is required: --kb or --kb-fixtures")


def _cs_oracle(opts: dict):
    cfg = ScorerConfig(beam_k=opts["beam_k"], aggregation=opts["aggregation"],
                       empty_tuple_score=opts["empty_score"])
    kb = _knowledge_base(opts)
    if isinstance(kb, StaticKB):
        return commonsense_oracle(kb, cfg, _extractor(opts))
    raise UsageError("the commonsense oracle needs a static --kb for its embedding lexicon")


def _oracle(opts: dict):
    kind = opts["oracle"]
    if kind == "lexical":
        return LexicalOracle()
    cs = _cs_oracle(opts)
    return cs if kind == "cs" else JointOracle(LexicalOracle(), cs)


def _save_stores(opts: dict) -> None:
    for store in _stores(opts):
        if store.mode == "record":
            store.save()


def _read_jsonl(path) -> list[dict]:
    with open(path) as f:
        rows = [json.loads(line) for line in f if line.strip()]
    return rows


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _concepts(d: dict) -> ConceptInput:
    return ConceptInput(tuple(d["concepts"]))


# --------------------------------------------------------------------------
# commands

def cmd_make_world(opts: dict) -> None:
    from .world import WorldConfig, build_world

    world = build_world(WorldConfig(seed=opts["seed"], sentences_per_scene=opts["sentences_per_scene"]))
    world.save(opts["out"])
    print(f"{len(world.corpus)} sentences, {len(world.train_inputs)} training inputs, "
          f"{len(world.eval_bench)} benchmark entries, {len(world.kb)} KB tuples -> {opts['out']}")


def cmd_fit_toy(opts: dict) -> None:
    rows = _read_jsonl(opts["corpus"])
    if not rows:
        raise ValueError(f"{opts['corpus']}: empty corpus")
    records = [(_concepts(r), r["text"]) for r in rows]
    vocab = Vocabulary.build(w for _, text in records for w in text.split())
    model = ToyModel.fit(records, vocab, opts["order"], opts["smoothing"])
    model.save(opts["out"])
    print(f"vocabulary {len(vocab)} perplexity {corpus_perplexity(model, records):.4f}")


def cmd_sample(opts: dict) -> None:
    model = ToyModel.load(opts["model"])
    bench = Benchmark.load(opts["bench"])
    sampler = _sampler(opts)
    if opts["n"] < 1:
        raise ValueError("--n must be positive")
    rows = []
    for i, (entry, rng) in enumerate(zip(bench, spawn_rngs(sampler.seed, len(bench)))):
        for _ in range(opts["n"]):
            y = sample_sequence(model, entry.x, sampler, rng)
            rows.append({"index": i, "concepts": list(entry.x.concepts),
                         "tokens": [model.vocab.tokens[t] for t in y.token_ids],
                         "text": model.vocab.render(y.token_ids)})
    _write_jsonl(opts["out"], rows)
    print(f"{len(rows)} samples -> {opts['out']}")


def cmd_score(opts: dict) -> None:
    oracle = _oracle(opts)
    rows = _read_jsonl(opts["samples"])
    try:
        for r in rows:
            r["o_score"] = float(oracle.score(_concepts(r), r["text"]))
            r["oracle"] = opts["oracle"]
    finally:
        _save_stores(opts)
    _write_jsonl(opts["out"], rows)
    mean = sum(r["o_score"] for r in rows) / len(rows) if rows else float("nan")
    print(f"{len(rows)} scored, mean {mean:.4f} -> {opts['out']}")


def cmd_train(opts: dict) -> None:
    model = ToyModel.load(opts["model"])
    data = load_training_set(opts["samples"], model.vocab)
    cfg = TrainConfig(lam=opts["lam"], learning_rate=opts["lr"], epochs=opts["epochs"],
                      seed=opts["seed"], batch_size=opts["batch_size"])
    R0 = NeuralR(model.vocab, concept_lexicon(model.vocab), opts["max_len"],
                 tuple(opts["hidden"]), opts["seed"])
    R, trace = train(R0, data, model, cfg)
    R.save(opts["out"], cfg, trace)
    last = trace[-1]
    print(f"{len(data)} examples, {R.n_params} parameters, final loss {last['loss']:.5f} "
          f"(ce {last['ce']:.5f}, reg {last['reg']:.5f}) -> {opts['out']}")


def cmd_decode(opts: dict) -> None:
    model = ToyModel.load(opts["model"])
    bench = Benchmark.load(opts["bench"])
    sampler = _sampler(opts)
    kind = opts["predictor"]
    if kind == "none":
        predictor = ConstantR(len(model.vocab), 1.0)
    elif kind == "exact":
        predictor = ExactR(model, _oracle(opts), sampler.max_len)
    else:
        predictor = NeuralR.load(kind)
    guided = GuidedModel(model, predictor)
    rows = []
    for i, (entry, rng) in enumerate(zip(bench, spawn_rngs(sampler.seed, len(bench)))):
        y = sample_sequence(guided, entry.x, sampler, rng)
        rows.append({"index": i, "concepts": list(entry.x.concepts), "text": model.vocab.render(y.token_ids)})
    _write_jsonl(opts["out"], rows)
    if guided.fallbacks:
        log.warning("%d steps fell back to the base distribution", guided.fallbacks)
    print(f"{len(rows)} outputs -> {opts['out']}")


def cmd_eval(opts: dict) -> None:
    bench = Benchmark.load(opts["bench"])
    outputs = [r["text"] for r in _read_jsonl(opts["outputs"])]
    oracle = _oracle(opts)
    name = opts["name"] or Path(opts["outputs"]).stem
    try:
        report, rows = evaluate_outputs(name, bench, outputs, oracle, {"oracle": opts["oracle"]})
    finally:
        _save_stores(opts)
    with open(opts["out"], "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    if opts["dump"]:
        _write_jsonl(opts["dump"], rows)
    bleu = "/" if report.bleu4 is None else f"{report.bleu4:.4f}"
    print(f"{name}: o_score {report.o_score:.4f} coverage {report.coverage:.4f} bleu4 {bleu} (n={report.n})")


def cmd_compare(opts: dict) -> None:
    reports = []
    for path in opts["reports"]:
        with open(path) as f:
            reports.append(EvalReport.from_dict(json.load(f)))
    rows = compare(reports, opts["baseline"])
    if opts["out"]:
        _write_jsonl(opts["out"], rows)
    print(format_table(rows))


def cmd_extract(opts: dict) -> None:
    extractor = _extractor(opts)
    path = Path(opts["sentences"])
    if path.suffix == ".jsonl":
        sentences = [r.get("text") or r["sentence"] for r in _read_jsonl(path)]
    else:
        sentences = [s.strip() for s in path.read_text().splitlines() if s.strip()]
    rows = []
    try:
        for s in sentences:
            rows.append({"sentence": s, "tuples": [t.to_dict() for t in extract_tuples(extractor, s)]})
    finally:
        _save_stores(opts)
    _write_jsonl(opts["out"], rows)
    print(f"{sum(len(r['tuples']) for r in rows)} tuples from {len(rows)} sentences -> {opts['out']}")


def cmd_kb_query(opts: dict) -> None:
    kb = _knowledge_base(opts)
    try:
        tails = kb.tails(opts["head"], RelationType(opts["relation"]), opts["k"])
    finally:
        _save_stores(opts)
    for t in tails:
        print(t)


def cmd_experiment(opts: dict) -> None:
    from .experiment import ExperimentConfig, run
    from .world import WorldConfig

    out = run(ExperimentConfig(world=WorldConfig(seed=opts["seed"])))
    if opts["out"]:
        with open(opts["out"], "w") as f:
            json.dump([r.to_dict() for r in out["reports"]], f, indent=2, sort_keys=True)
            f.write("\n")
    print(format_table(out["rows"]))
    log.info("finished in %.1fs", out["seconds"])


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="guidedgen", description="Oracle-guided decoding toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    c = _Command(sub, "make-world", "Write the synthetic concept-to-sentence world to a directory.", cmd_make_world)
    c.opt("--out", help="output directory").opt("--seed", type=int, help="world seed (required)")
    c.opt("--sentences-per-scene", 20, type=int, help="noisy realisations per scene (default 20)")

    c = _Command(sub, "fit-toy", "Fit an n-gram base model on a {concepts, text} corpus.", cmd_fit_toy)
    c.opt("--corpus", help="corpus JSONL").opt("--out", help="model JSON")
    c.opt("--order", 3, type=int, choices=[1, 2, 3], help="n-gram order (default 3)")
    c.opt("--smoothing", 0.01, type=float, help="additive smoothing (default 0.01)")

    c = _Command(sub, "sample", "Draw n base-model samples per benchmark entry.", cmd_sample)
    c.opt("--model", help="model JSON").opt("--bench", help="benchmark JSONL").opt("--out", help="samples JSONL")
    c.opt("--n", 16, type=int, help="samples per entry (default 16)")
    _sampler_opts(c, top_p=0.95, temperature=0.7)

    c = _Command(sub, "score", "Label samples with an oracle score.", cmd_score)
    c.opt("--samples", help="samples JSONL").opt("--out", help="labelled JSONL")
    c.opt("--oracle", "cs", choices=["cs", "lexical", "joint"], help="oracle (default cs)")
    _scorer_opts(c)

    c = _Command(sub, "train", "Train a neural R predictor on labelled samples.", cmd_train)
    c.opt("--samples", help="labelled samples JSONL").opt("--model", help="base model JSON")
    c.opt("--out", help="predictor JSON").opt("--seed", type=int, help="init and shuffling seed (required)")
    c.opt("--lam", 0.5, type=float, help="consistency weight (default 0.5)")
    c.opt("--lr", 0.2, type=float, help="learning rate (default 0.2)")
    c.opt("--epochs", 200, type=int, help="epochs (default 200)")
    c.opt("--batch-size", 16, type=int, help="examples per step (default 16)")
    c.opt("--hidden", [64, 64], type=int, nargs=2, help="hidden layer widths (default 64 64)")
    c.opt("--max-len", 16, type=int, help="length normaliser for the length feature (default 16)")

    c = _Command(sub, "decode", "Sample from the base model reweighted by a predictor.", cmd_decode)
    c.opt("--model", help="base model JSON").opt("--bench", help="benchmark JSONL").opt("--out", help="outputs JSONL")
    c.opt("--predictor", "none", help="predictor JSON, 'exact' (enumeration) or 'none' (default none)")
    c.opt("--oracle", "cs", choices=["cs", "lexical", "joint"], help="oracle for --predictor exact")
    _sampler_opts(c, top_k=30, temperature=0.7)
    _scorer_opts(c)

    c = _Command(sub, "eval", "Score one output per benchmark entry.", cmd_eval)
    c.opt("--outputs", help="outputs JSONL").opt("--bench", help="benchmark JSONL").opt("--out", help="report JSON")
    c.opt("--name", None, help="system name (default: outputs file stem)")
    c.opt("--dump", None, help="optional per-entry JSONL")
    c.opt("--oracle", "cs", choices=["cs", "lexical", "joint"], help="oracle behind the o_score column")
    _scorer_opts(c)

    c = _Command(sub, "compare", "Tabulate reports with deltas against a baseline.", cmd_compare)
    c.opt("--reports", nargs="+", help="report JSON files").opt("--baseline", None, help="baseline system name")
    c.opt("--out", None, help="optional rows JSONL")

    c = _Command(sub, "extract", "Extract relation tuples from sentences.", cmd_extract)
    c.opt("--sentences", help="text file (one per line) or JSONL with text/sentence").opt("--out", help="tuples JSONL")
    _scorer_opts(c)

    c = _Command(sub, "kb-query", "Print the top-k tails for a (head, relation) query.", cmd_kb_query, ())
    c.opt("--head", help="head phrase").opt("--relation", choices=[r.value for r in RelationType], help="relation")
    c.opt("--k", 8, type=int, help="number of tails (default 8)")
    _scorer_opts(c)

    c = _Command(sub, "experiment", "Run the desk-scale base / guided comparison.", cmd_experiment)
    c.opt("--seed", type=int, help="world seed (required)").opt("--out", None, help="optional reports JSON")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(ns.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    cmd: _Command = ns._command
    try:
        opts = cmd.resolve(ns)
        cmd.func(opts)
        cmd.write_config(opts)
    except UsageError as exc:
        print(f"guidedgen {cmd.name}: {exc}", file=sys.stderr)
        return 2
    except (GuidedGenError, ValueError, KeyError, OSError) as exc:
        print(f"guidedgen {cmd.name}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
