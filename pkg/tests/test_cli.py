import json
import math

import numpy as np
import pytest
from scipy import stats

from conftest import brute_force_leaves
from guidedgen.cli import main
from guidedgen.lm import ConceptInput, ToyModel, sequence_log_prob

TINY_CORPUS = [
    {"concepts": ["a"], "text": "a b"},
    {"concepts": ["a"], "text": "b"},
    {"concepts": ["a"], "text": "b b a"},
    {"concepts": ["b"], "text": "a"},
]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """make-world -> fit-toy -> sample -> score -> train, on a small world."""
    d = tmp_path_factory.mktemp("pipe")
    assert run("make-world", "--out", d / "w", "--seed", 0, "--sentences-per-scene", 3) == 0
    w = d / "w"
    assert run("fit-toy", "--corpus", w / "corpus.jsonl", "--out", d / "model.json") == 0
    assert run("sample", "--model", d / "model.json", "--bench", w / "train_inputs.jsonl", "--n", 2,
               "--seed", 1, "--out", d / "s.jsonl") == 0
    assert run("score", "--samples", d / "s.jsonl", "--kb", w / "kb.jsonl", "--out", d / "l.jsonl") == 0
    assert run("train", "--samples", d / "l.jsonl", "--model", d / "model.json", "--seed", 2,
               "--epochs", 2, "--hidden", 8, 8, "--out", d / "r.json") == 0
    return d


class TestPipeline:
    def test_sample_counts(self, pipeline):
        n_inputs = len((pipeline / "w" / "train_inputs.jsonl").read_text().splitlines())
        assert len((pipeline / "s.jsonl").read_text().splitlines()) == 2 * n_inputs

    def test_resolved_config_written(self, pipeline):
        cfg = json.loads((pipeline / "s.jsonl.config.json").read_text())
        assert cfg["command"] == "sample" and cfg["seed"] == 1 and cfg["top_p"] == 0.95

    def test_scores_replay(self, pipeline, tmp_path):
        assert run("score", "--samples", pipeline / "s.jsonl", "--kb", pipeline / "w" / "kb.jsonl",
                   "--out", tmp_path / "l.jsonl") == 0
        assert (tmp_path / "l.jsonl").read_bytes() == (pipeline / "l.jsonl").read_bytes()

    def test_all_sensical_scores_one(self, pipeline, tmp_path):
        rows = [{"concepts": ["dog", "run"], "text": "the dog can run"},
                {"concepts": ["pen", "write"], "text": "the pen is used to write"}]
        write_jsonl(tmp_path / "s.jsonl", rows)
        assert run("score", "--samples", tmp_path / "s.jsonl", "--kb", pipeline / "w" / "kb.jsonl",
                   "--out", tmp_path / "o.jsonl") == 0
        assert [json.loads(l)["o_score"] for l in (tmp_path / "o.jsonl").read_text().splitlines()] == [1.0, 1.0]

    def test_decode_and_eval(self, pipeline, capsys):
        w = pipeline / "w"
        for name, pred in (("guided", pipeline / "r.json"), ("base", "none")):
            assert run("decode", "--model", pipeline / "model.json", "--predictor", pred, "--bench",
                       w / "bench.jsonl", "--seed", 5, "--out", pipeline / f"{name}.jsonl") == 0
            assert run("eval", "--outputs", pipeline / f"{name}.jsonl", "--bench", w / "bench.jsonl",
                       "--kb", w / "kb.jsonl", "--out", pipeline / f"{name}.report.json") == 0
        assert run("compare", "--reports", pipeline / "base.report.json", pipeline / "guided.report.json",
                   "--baseline", "base") == 0
        assert "guided" in capsys.readouterr().out

    def test_constant_predictor_matches_base_sampling(self, pipeline, tmp_path):
        w = pipeline / "w"
        common = ["--model", pipeline / "model.json", "--bench", w / "bench.jsonl", "--seed", 8,
                  "--top-p", 1.0, "--top-k", 1000, "--temperature", 1.0]
        assert run("decode", *common, "--out", tmp_path / "d.jsonl") == 0
        assert run("sample", *common, "--n", 1, "--out", tmp_path / "s.jsonl") == 0
        d = [json.loads(l)["text"] for l in (tmp_path / "d.jsonl").read_text().splitlines()]
        s = [json.loads(l)["text"] for l in (tmp_path / "s.jsonl").read_text().splitlines()]
        assert d == s

    def test_extract_and_kb_query(self, pipeline, tmp_path, capsys):
        w = pipeline / "w"
        assert run("extract", "--sentences", w / "gold.jsonl", "--out", tmp_path / "t.jsonl") == 0
        gold = [json.loads(l) for l in (w / "gold.jsonl").read_text().splitlines()]
        got = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert [g["tuples"] for g in got] == [g["tuples"] for g in gold]
        capsys.readouterr()
        assert run("kb-query", "--kb", w / "kb.jsonl", "--head", "dog", "--relation", "CapableOf", "--k", 2) == 0
        assert capsys.readouterr().out.split() == ["run", "bark"]

    def test_external_extractor_replay(self, tmp_path):
        from pathlib import Path
        fx = Path(__file__).parent / "fixtures"
        outs = []
        for i in range(2):
            out = tmp_path / f"t{i}.jsonl"
            assert run("extract", "--sentences", fx / "extraction_sentences.txt", "--extractor", "external",
                       "--fixtures", fx / "extraction_replay.jsonl", "--out", out) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        first = json.loads(outs[0].decode().splitlines()[0])
        assert first["tuples"][1] == {"head": "runner", "relation": "CapableOf", "tail": "win the car race"}


class TestFitToy:
    def test_single_sentence_corpus(self, tmp_path, capsys):
        corpus = write_jsonl(tmp_path / "c.jsonl", [{"concepts": ["a"], "text": "a b c"}])
        assert run("fit-toy", "--corpus", corpus, "--out", tmp_path / "m.json", "--order", 2) == 0
        ppl = float(capsys.readouterr().out.split()[-1])
        assert math.log(ppl) < 0.05

    def test_perplexity_cross_check(self, tmp_path, capsys):
        corpus = write_jsonl(tmp_path / "c.jsonl", TINY_CORPUS)
        assert run("fit-toy", "--corpus", corpus, "--out", tmp_path / "m.json") == 0
        ppl = float(capsys.readouterr().out.split()[-1])
        m = ToyModel.load(tmp_path / "m.json")
        nll = n = 0
        for r in TINY_CORPUS:
            ids = m.vocab.encode(r["text"].split()) + [m.vocab.eos_id]
            nll -= sequence_log_prob(m, ConceptInput(tuple(r["concepts"])), ids)
            n += len(ids)
        assert ppl == pytest.approx(math.exp(nll / n), rel=1e-4)

    def test_empty_corpus_fails(self, tmp_path, capsys):
        (tmp_path / "c.jsonl").write_text("")
        assert run("fit-toy", "--corpus", tmp_path / "c.jsonl", "--out", tmp_path / "m.json") == 1
        assert "empty" in capsys.readouterr().err


class TestExactDecode:
    def test_matches_brute_force_posterior(self, tmp_path):
        corpus = write_jsonl(tmp_path / "c.jsonl", TINY_CORPUS)
        assert run("fit-toy", "--corpus", corpus, "--out", tmp_path / "m.json", "--order", 2) == 0
        n = 3000
        bench = write_jsonl(tmp_path / "b.jsonl", [{"concepts": ["a"]}] * n)
        assert run("decode", "--model", tmp_path / "m.json", "--bench", bench, "--predictor", "exact",
                   "--oracle", "lexical", "--max-len", 3, "--top-p", 1.0, "--temperature", 1.0,
                   "--top-k", 4, "--seed", 0, "--out", tmp_path / "d.jsonl") == 0
        texts = [json.loads(l)["text"] for l in (tmp_path / "d.jsonl").read_text().splitlines()]
        m = ToyModel.load(tmp_path / "m.json")
        x = ConceptInput(("a",))
        leaves = brute_force_leaves(m, x, 3)
        post = {}
        for ids, p in leaves.items():
            text = m.vocab.render(ids)
            if "a" in text.split():
                post[text] = post.get(text, 0.0) + p
        Z = sum(post.values())
        keys = sorted(post)
        assert set(texts) <= set(keys)
        observed = np.array([texts.count(k) for k in keys])
        expected = np.array([post[k] / Z * n for k in keys])
        assert stats.chisquare(observed, expected).pvalue > 0.01


class TestOptions:
    def test_missing_seed_is_usage_error(self, tmp_path, capsys):
        assert run("sample", "--model", "m", "--bench", "b", "--out", tmp_path / "s") == 2
        assert "--seed" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "colour": "red"}))
        assert run("sample", "--config", tmp_path / "c.json") == 2
        assert "colour" in capsys.readouterr().err

    def test_config_then_flag_override(self, pipeline, tmp_path):
        cfg = {"model": str(pipeline / "model.json"), "bench": str(pipeline / "w" / "bench.jsonl"),
               "seed": 3, "n": 1, "top-k": 5, "out": str(tmp_path / "a.jsonl")}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run("sample", "--config", tmp_path / "c.json", "--seed", 4) == 0
        resolved = json.loads((tmp_path / "a.jsonl.config.json").read_text())
        assert resolved["seed"] == 4 and resolved["top_k"] == 5 and resolved["n"] == 1

    def test_missing_input_file(self, tmp_path):
        assert run("eval", "--outputs", tmp_path / "nope.jsonl", "--bench", tmp_path / "nope.jsonl",
                   "--oracle", "lexical", "--out", tmp_path / "r.json") == 1

    def test_replay_miss_exit(self, tmp_path):
        (tmp_path / "s.txt").write_text("An unseen sentence.\n")
        assert run("extract", "--sentences", tmp_path / "s.txt", "--extractor", "external", "--fixtures",
                   tmp_path / "empty.jsonl", "--out", tmp_path / "t.jsonl") == 1
