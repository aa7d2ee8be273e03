from __future__ import annotations

import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from psydiag.metrics import (
    CorpusError,
    HashingEmbedder,
    dialogue_stats,
    extract_keywords,
    hapax_proportion,
    intra_emr_diversity,
    jaccard,
    mcnemar_exact,
    normalized_entropy,
    per_label_prf,
    semantic_diversity,
    subset_accuracy,
    tokenize,
)
from psydiag.model import DialogueSession, DialogueTurn, DisorderLabel, Role, Strategy, profile

L = DisorderLabel
label_sets = st.frozensets(st.sampled_from(list(DisorderLabel)))


def test_subset_accuracy_examples():
    golds = [profile("MDD", "AD"), profile("BD", "MDD"), profile("ADHD", "AD"), profile("MDD", "ADHD")]
    assert subset_accuracy(golds, golds) == 1.0
    preds = [golds[0], profile("MDD"), profile("AD"), profile()]
    assert subset_accuracy(preds, golds) == 0.25
    assert subset_accuracy([profile("MDD", "AD")], [profile("MDD")]) == 0.0


def test_subset_accuracy_input_errors():
    with pytest.raises(ValueError):
        subset_accuracy([], [])
    with pytest.raises(ValueError):
        subset_accuracy([profile("MDD")], [])


@given(st.lists(st.tuples(label_sets, label_sets), min_size=1, max_size=30))
def test_subset_accuracy_bounds(pairs):
    preds, golds = zip(*pairs)
    acc = subset_accuracy(preds, golds)
    assert 0.0 <= acc <= 1.0
    assert acc == sum(p == g for p, g in pairs) / len(pairs)


def test_prf_examples():
    golds = [profile("MDD"), profile("MDD"), profile("MDD"), profile()]
    preds = [profile("MDD"), profile("MDD"), profile(), profile("MDD")]
    r = per_label_prf(preds, golds, L.MDD)
    assert r.precision == pytest.approx(2 / 3) and r.recall == pytest.approx(2 / 3) and r.f1 == pytest.approx(2 / 3)
    assert per_label_prf(golds, golds, L.MDD).f1 == 1.0
    none = per_label_prf(preds, golds, L.ADHD)
    assert (none.precision, none.recall, none.f1) == (0.0, 0.0, 0.0)


@pytest.mark.parametrize("b,c,p", [(0, 0, 1.0), (1, 1, 1.0), (5, 0, 0.0625)])
def test_mcnemar_examples(b, c, p):
    assert mcnemar_exact(b, c) == pytest.approx(p)


@given(st.integers(0, 60), st.integers(0, 60))
def test_mcnemar_matches_binomial_test(b, c):
    p = mcnemar_exact(b, c)
    assert p == mcnemar_exact(c, b)
    if b + c:
        assert p == pytest.approx(stats.binomtest(b, b + c, 0.5).pvalue, abs=1e-12)


def _session(emr_id, *texts, sid="s"):
    roles = (Role.DOCTOR, Role.PATIENT)
    turns = tuple(DialogueTurn(i, roles[i % 2], t) for i, t in enumerate(texts))
    return DialogueSession(sid, emr_id, None, 1, Strategy.RANDOM, 0, turns, {}, profile())


def test_dialogue_stats_example():
    s = _session("e", "ab", "xyz", "cd")
    st_ = dialogue_stats([s])
    assert (st_.avg_chars_doctor, st_.avg_chars_patient, st_.avg_turns) == (2.0, 3.0, 3)
    with pytest.raises(CorpusError):
        dialogue_stats([])


def test_nonspace_char_mode():
    s = _session("e", "a b", "x y z")
    assert dialogue_stats([s], "nonspace").avg_chars_patient == 3.0


def test_jaccard_diversity_examples():
    assert intra_emr_diversity([{"a"}, {"a"}]) == 0.0
    assert intra_emr_diversity([{"a"}, {"b"}]) == 1.0
    assert intra_emr_diversity([{"a", "b"}, {"b", "c"}, {"c", "d"}]) == pytest.approx(7 / 9)
    assert jaccard(set(), set()) == 1.0


@given(st.lists(st.frozensets(st.sampled_from("abcdef")), min_size=2, max_size=6))
def test_intra_diversity_matches_brute_force(sets):
    pairs = list(combinations(sets, 2))
    sims = [1.0 if not (a | b) else len(a & b) / len(a | b) for a, b in pairs]
    want = 1 - sum(sims) / len(sims)
    got = intra_emr_diversity(sets)
    assert got == pytest.approx(want)
    assert 0.0 <= got <= 1.0


def test_entropy_examples():
    assert normalized_entropy("a b c d".split()) == pytest.approx(1.0)
    assert normalized_entropy("a a a a".split()) == 0.0
    assert normalized_entropy("a a b b b b".split()) == pytest.approx(0.9183, abs=1e-4)


@given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=80))
def test_entropy_matches_scipy(tokens):
    counts = [tokens.count(t) for t in sorted(set(tokens))]
    got = normalized_entropy(tokens)
    assert 0.0 <= got <= 1.0
    if len(counts) > 1:
        assert got == pytest.approx(stats.entropy(counts, base=2) / math.log2(len(counts)))


def test_hapax_examples():
    assert hapax_proportion("a b c".split()) == 1.0
    assert hapax_proportion("a a b".split()) == 0.5
    assert hapax_proportion("a a b b".split()) == 0.0


def test_semantic_examples():
    assert semantic_diversity([[1, 0], [1, 0]]) == pytest.approx(0.0)
    assert semantic_diversity([[1, 0], [0, 1]]) == pytest.approx(1.0)
    assert semantic_diversity([[1, 0], [1, 0], [0, 1]]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        semantic_diversity([[0, 0], [1, 0]])


@given(st.lists(st.lists(st.floats(0.01, 10), min_size=3, max_size=3), min_size=2, max_size=6))
def test_semantic_range_for_nonnegative_vectors(vs):
    d = semantic_diversity(vs)
    assert 0.0 <= d <= 1.0 + 1e-12


def test_keywords_examples():
    assert extract_keywords("pain pain sleep", 1, stopwords=frozenset()) == {"pain"}
    assert extract_keywords("bword aword", 1, stopwords=frozenset()) == {"aword"}
    assert extract_keywords("x y", 10, stopwords=frozenset()) == {"x", "y"}


def test_tokenizer_modes():
    assert tokenize("I can’t sleep, doctor.") == ["i", "can't", "sleep", "doctor"]
    assert tokenize("我很累 ok") == ["我", "很", "累", "ok"]
    assert tokenize("a  b") == tokenize("a b", "whitespace")
    assert tokenize("ab c", "codepoint") == ["a", "b", "c"]


def test_hashing_embedder_is_deterministic():
    e = HashingEmbedder(dim=64)
    a, b = e(["sleep badly at night", "sleep badly at night"])
    assert np.array_equal(a, b) and a.sum() == 4
    assert semantic_diversity(e(["one two", "one two"])) == pytest.approx(0.0)
