import itertools
import math
from functools import lru_cache

import numpy as np
import pytest

from guidedgen.lm import ConceptInput, ToyModel, Vocabulary, make_rng


def brute_force_leaves(model, x, max_len):
    """Complete sequences and probabilities by walking itertools.product.

    Independent of ``enumerate_sequences``: every token string of length up
    to ``max_len`` is generated, kept if it is a leaf (eos last and only, or
    eos-free at full length) and scored as a plain product of step probs.
    """
    V, eos = len(model.vocab), model.vocab.eos_id
    out = {}
    for n in range(1, max_len + 1):
        for ids in itertools.product(range(V), repeat=n):
            if eos in ids[:-1]:
                continue
            if ids[-1] != eos and n < max_len:
                continue
            prob = 1.0
            for t in range(n):
                prob *= model.next_distribution(x, ids[:t])[ids[t]]
            out[ids] = prob
    return out


def random_instance(seed):
    """A random toy model with |V| <= 4, max_len <= 4 and oracle values in [0,1]."""
    rng = make_rng(seed)
    V = int(rng.integers(2, 5))
    words = ["a", "b", "c"][: V - 1]
    vocab = Vocabulary.build(words)
    order = int(rng.integers(1, 4))
    model = ToyModel.random(vocab, order, rng, concentration=1.0)
    max_len = int(rng.integers(1, 5))
    x = ConceptInput(("a",))
    leaves = brute_force_leaves(model, x, max_len)
    values = {vocab.render(ids): float(rng.random()) for ids in leaves}
    return model, x, max_len, leaves, values


@lru_cache(maxsize=None)
def _world():
    from guidedgen.world import build_world

    return build_world()


@pytest.fixture(scope="session")
def world():
    return _world()


@pytest.fixture
def abc_vocab():
    return Vocabulary.build(["a", "b"])


def assert_prob(x, y, tol=1e-12):
    assert math.isclose(x, y, rel_tol=0, abs_tol=tol), (x, y)


__all__ = ["brute_force_leaves", "random_instance", "assert_prob", "np"]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title = results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")
