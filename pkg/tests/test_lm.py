import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import brute_force_leaves
from guidedgen.errors import ContractViolation, EnumerationBudgetError
from guidedgen.lm import (ConceptInput, SamplerConfig, Sequence, ToyModel, Vocabulary,
                          corpus_perplexity, enumerate_sequences, make_rng, next_distribution,
                          sample_sequence, sampling_distribution, sequence_log_prob, spawn_rngs)

X = ConceptInput(("a",))


def bigram_ab():
    vocab = Vocabulary.build(["a", "b"])
    return ToyModel.fit([(X, "a b")], vocab, order=2, smoothing=0.01)


class TestVocabulary:
    def test_build_sorts_and_appends_eos(self):
        v = Vocabulary.build(["b", "a", "b"])
        assert v.tokens == ("a", "b", "</s>")
        assert v.eos_id == 2

    def test_render_drops_eos(self):
        v = Vocabulary.build(["a", "b"])
        assert v.render([0, 1, 2]) == "a b"

    @pytest.mark.parametrize("tokens,eos", [(("a",), 0), (("a", "a"), 1), (("a", "b"), 2)])
    def test_invalid(self, tokens, eos):
        with pytest.raises(ValueError):
            Vocabulary(tokens, eos)


class TestConceptInput:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ConceptInput(())

    def test_duplicate_after_stemming_rejected(self):
        with pytest.raises(ValueError):
            ConceptInput(("dog", "dogs"))

    def test_key_is_order_free(self):
        assert ConceptInput(("dog", "walk")).key == ConceptInput(("walked", "dogs")).key


class TestSequence:
    def test_terminated_flag(self, abc_vocab):
        assert Sequence.of([0, 2], abc_vocab).terminated
        assert not Sequence.of([0, 1], abc_vocab).terminated

    @pytest.mark.parametrize("ids", [[2, 0], [0, 3], [2, 2]])
    def test_invalid(self, abc_vocab, ids):
        with pytest.raises(ContractViolation):
            Sequence.of(ids, abc_vocab)


class TestNextDistribution:
    def test_uniform(self, abc_vocab):
        m = ToyModel.uniform(abc_vocab)
        np.testing.assert_allclose(next_distribution(m, X, [0, 1]), np.full(3, 1 / 3))

    def test_bigram_smoothed_ratio(self):
        # row for context "a" holds counts (a=0, b=1, eos=0) plus 0.01 each
        p = next_distribution(bigram_ab(), X, [0])
        assert math.isclose(p[1], 1.01 / 1.03, rel_tol=1e-12)
        assert math.isclose(p[0], 0.01 / 1.03, rel_tol=1e-12)

    def test_after_eos_is_a_contract_violation(self, abc_vocab):
        with pytest.raises(ContractViolation):
            next_distribution(ToyModel.uniform(abc_vocab), X, [0, 2])

    def test_repeatable(self):
        m = bigram_ab()
        assert np.array_equal(next_distribution(m, X, [0]), next_distribution(m, X, [0]))

    def test_unseen_concepts_fall_back_to_shared_table(self):
        m = bigram_ab()
        other = ConceptInput(("zebra",))
        np.testing.assert_array_equal(m.next_distribution(other, (0,)), m.next_distribution(X, (0,)))

    def test_concept_tables_are_separate(self):
        vocab = Vocabulary.build(["a", "b"])
        xa, xb = ConceptInput(("a",)), ConceptInput(("b",))
        m = ToyModel.fit([(xa, "a"), (xb, "b")], vocab, order=1, smoothing=0.0)
        assert m.next_distribution(xa, ())[0] == 0.5
        assert m.next_distribution(xb, ())[1] == 0.5
        assert m.next_distribution(ConceptInput(("c",)), ())[0] == 0.25

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            ToyModel.fit([], Vocabulary.build(["a"]))

    def test_round_trip(self, tmp_path):
        m = bigram_ab()
        m.save(tmp_path / "m.json")
        m2 = ToyModel.load(tmp_path / "m.json")
        for prefix in [(), (0,), (1,), (0, 1)]:
            np.testing.assert_array_equal(m.next_distribution(X, prefix), m2.next_distribution(X, prefix))
        m2.save(tmp_path / "m2.json")
        assert (tmp_path / "m.json").read_text() == (tmp_path / "m2.json").read_text()


class TestSamplingDistribution:
    P = np.array([0.5, 0.3, 0.2])

    def test_identity(self):
        np.testing.assert_allclose(sampling_distribution(self.P, SamplerConfig()), self.P)

    def test_top_p(self):
        q = sampling_distribution(self.P, SamplerConfig(top_p=0.6))
        np.testing.assert_allclose(q, [0.625, 0.375, 0.0])

    def test_top_p_exact_boundary_keeps_shortest_prefix(self):
        q = sampling_distribution(self.P, SamplerConfig(top_p=0.8))
        np.testing.assert_allclose(q, [0.625, 0.375, 0.0])

    def test_top_k(self):
        np.testing.assert_allclose(sampling_distribution(self.P, SamplerConfig(top_k=1)), [1, 0, 0])

    def test_temperature_is_power(self):
        q = sampling_distribution(self.P, SamplerConfig(temperature=0.5))
        np.testing.assert_allclose(q, self.P**2 / np.sum(self.P**2))

    def test_temperature_before_truncation(self):
        # T=2 flattens to sqrt-probs (0.417, 0.323, 0.264); top_p=0.6 then needs two tokens
        q = sampling_distribution(self.P, SamplerConfig(temperature=2.0, top_p=0.6))
        r = np.sqrt(self.P[:2])
        np.testing.assert_allclose(q, np.append(r / r.sum(), 0.0))

    def test_greedy_ties_go_to_lowest_index(self):
        q = sampling_distribution(np.array([0.2, 0.4, 0.4]), SamplerConfig(temperature=1e-6))
        np.testing.assert_array_equal(q, [0, 1, 0])

    @pytest.mark.parametrize("kw", [{"top_p": 0.0}, {"top_p": 1.5}, {"top_k": 0},
                                    {"temperature": 0.0}, {"max_len": 0}, {"seed": -1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


class TestSampleSequence:
    def test_greedy_matches_argmax_path(self):
        m = bigram_ab()
        y = sample_sequence(m, X, SamplerConfig(temperature=1e-6, max_len=5), make_rng(0))
        assert m.vocab.render(y.token_ids) == "a b" and y.terminated

    def test_same_seed_same_sequence(self, abc_vocab):
        m = ToyModel.random(abc_vocab, 2, make_rng(3))
        cfg = SamplerConfig(max_len=6)
        assert sample_sequence(m, X, cfg, make_rng(9)) == sample_sequence(m, X, cfg, make_rng(9))

    def test_force_termination(self, abc_vocab):
        m = ToyModel.uniform(abc_vocab)
        for seed in range(50):
            y = sample_sequence(m, X, SamplerConfig(max_len=3), make_rng(seed))
            assert len(y) <= 3
            assert y.terminated == (y.token_ids[-1] == abc_vocab.eos_id)

    def test_unbiased_against_enumeration(self):
        """Chi-square over whole sequences and a 3-sigma check on first tokens, 10^5 draws."""
        vocab = Vocabulary.build(["a", "b", "c"])
        m = ToyModel.random(vocab, 2, make_rng(17))
        leaves = enumerate_sequences(m, X, 3)
        index = {s.token_ids: i for i, (s, _) in enumerate(leaves)}
        probs = np.array([p for _, p in leaves])
        counts = np.zeros(len(leaves))
        rng = make_rng(2024)
        cfg = SamplerConfig(max_len=3)
        n = 100_000
        for _ in range(n):
            counts[index[sample_sequence(m, X, cfg, rng).token_ids]] += 1
        assert stats.chisquare(counts, probs * n).pvalue > 0.01
        first = np.zeros(len(vocab))
        for (s, _), c in zip(leaves, counts):
            first[s.token_ids[0]] += c
        p0 = m.next_distribution(X, ())
        sigma = np.sqrt(n * p0 * (1 - p0))
        assert np.all(np.abs(first - n * p0) <= 3 * sigma)


class TestSequenceLogProb:
    def test_uniform(self):
        vocab = Vocabulary.build(["a", "b", "c"])
        y = Sequence.of([0, 1, 3], vocab)
        assert math.isclose(sequence_log_prob(ToyModel.uniform(vocab), X, y), 3 * math.log(0.25))

    def test_certain_step(self):
        vocab = Vocabulary.build(["a"])
        m = ToyModel.fit([(X, "")], vocab, order=1, smoothing=0.0)
        assert sequence_log_prob(m, X, [vocab.eos_id]) == 0.0

    def test_bigram_matches_step_product(self):
        m = bigram_ab()
        ids = [0, 1, 2]
        expected = 1.0
        for t in range(3):
            expected *= m.next_distribution(X, tuple(ids[:t]))[ids[t]]
        assert math.isclose(sequence_log_prob(m, X, ids), math.log(expected), rel_tol=1e-12)

    def test_perplexity_matches_log_prob(self):
        m = bigram_ab()
        lp = sequence_log_prob(m, X, [0, 1, 2])
        assert math.isclose(corpus_perplexity(m, [(X, "a b")]), math.exp(-lp / 3), rel_tol=1e-12)


class TestEnumerate:
    def test_two_token_vocabulary(self):
        vocab = Vocabulary.build(["a"])
        leaves = enumerate_sequences(ToyModel.uniform(vocab), X, 2)
        assert {vocab.render(s.token_ids) + ("." if s.terminated else "") for s, _ in leaves} == \
            {".", "a.", "a a"}
        assert math.isclose(sum(p for _, p in leaves), 1.0)

    def test_uniform_three_tokens(self):
        vocab = Vocabulary.build(["a", "b"])
        leaves = {s.token_ids: p for s, p in enumerate_sequences(ToyModel.uniform(vocab), X, 2)}
        e = vocab.eos_id
        assert leaves == pytest.approx({(e,): 1 / 3, (0, e): 1 / 9, (1, e): 1 / 9, (0, 0): 1 / 9,
                                        (0, 1): 1 / 9, (1, 0): 1 / 9, (1, 1): 1 / 9}, abs=1e-15)

    def test_budget_refusal(self):
        vocab = Vocabulary.build([f"w{i}" for i in range(9)])
        with pytest.raises(EnumerationBudgetError):
            enumerate_sequences(ToyModel.uniform(vocab), X, 6, budget=10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), V=st.integers(2, 4), order=st.integers(1, 3),
           max_len=st.integers(1, 4))
    def test_mass_and_brute_force(self, seed, V, order, max_len):
        vocab = Vocabulary.build(["a", "b", "c"][: V - 1])
        m = ToyModel.random(vocab, order, make_rng(seed))
        leaves = {s.token_ids: p for s, p in enumerate_sequences(m, X, max_len)}
        assert abs(sum(leaves.values()) - 1.0) <= 1e-9
        brute = brute_force_leaves(m, X, max_len)
        assert leaves.keys() == brute.keys()
        for k in leaves:
            assert abs(leaves[k] - brute[k]) <= 1e-12


class TestRng:
    def test_spawned_streams_reproducible_and_distinct(self):
        a = [g.random() for g in spawn_rngs(5, 3)]
        b = [g.random() for g in spawn_rngs(5, 3)]
        assert a == b and len(set(a)) == 3
