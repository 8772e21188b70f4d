import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from adlog.detect import (
    DetectionError, NodeTuple, accuracy, bleu1, classify, compare_models, distinct_tuples,
    evaluate_model, extract_node_tuples, top_set, top_sets_by_node,
)
from adlog.ingest import EventSequence, SequencePair, build_vocabulary
from adlog.seq2seq import ModelParams, Seq2Seq
from adlog.tracesim import DEFAULT_GATEWAYS

GW = {n: g for g, members in enumerate(DEFAULT_GATEWAYS) for n in members}


def test_bleu_examples():
    assert bleu1(list("abc"), list("abc")) == 100.0
    assert bleu1(list("xyz"), list("abc")) == 0.0
    assert bleu1(list("aab"), list("abc")) == pytest.approx(200 / 3, abs=1e-12)
    assert bleu1([], list("abc")) == 0.0
    # short prediction pays the brevity penalty, unless it is switched off
    assert bleu1(list("ab"), list("abcd")) == pytest.approx(100 * math.exp(-1))
    assert bleu1(list("ab"), list("abcd"), brevity_penalty=False) == 100.0
    with pytest.raises(ValueError):
        bleu1(list("a"), [])


@pytest.mark.parametrize("case", range(50))
def test_bleu_matches_brute_force(case):
    rng = np.random.default_rng(300 + case)
    pred = rng.integers(0, 6, int(rng.integers(0, 12))).tolist()
    ref = rng.integers(0, 6, int(rng.integers(1, 12))).tolist()
    assert abs(bleu1(pred, ref) - oracles.bleu1(pred, ref)) < 1e-12


@given(st.lists(st.integers(0, 8), max_size=30), st.lists(st.integers(0, 8), min_size=1, max_size=30))
def test_bleu_bounds(pred, ref):
    assert 0.0 <= bleu1(pred, ref) <= 100.0
    assert bleu1(ref, ref) == 100.0


def tup(node, actual, pred, p, t=0.0):
    return NodeTuple(node, actual, pred, p, t)


def test_top_set_order_and_ties():
    ts = [tup(1, 3, 3, 0.5, 2.0), tup(0, 12, 12, 0.9, 5.0), tup(4, 6, 6, 0.5, 1.0),
          tup(2, 3, 3, 0.5, 1.0)]
    assert top_set(ts, 1) == [ts[1]]
    assert top_set(ts, 3) == [ts[1], ts[3], ts[2]]
    assert top_set(ts[:1], 5) == ts[:1]
    with pytest.raises(ValueError):
        top_set(ts, 0)


@given(st.lists(st.tuples(st.integers(0, 15), st.floats(0, 1), st.floats(0, 10)), max_size=40),
       st.integers(1, 8))
def test_top_set_properties(rows, k):
    ts = [tup(n, 0, 0, p, t) for n, p, t in rows]
    A = top_set(ts, k)
    assert len(A) == min(k, len(ts))
    ranked = sorted(t.probability for t in ts)[::-1]
    assert [t.probability for t in A] == ranked[:len(A)]


def test_classify_examples():
    labels, flagged = classify([tup(14, 2, 15, 0.9), tup(6, 15, 15, 0.9), tup(2, 11, 14, 0.9)], GW)
    assert labels == ["anomalous", "benign", "benign"]
    assert flagged == [(14, 15)]
    with pytest.raises(DetectionError):
        classify([tup(99, 2, 2, 0.5)], GW)


@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 15), st.integers(0, 15)), max_size=30))
def test_classify_never_flags_same_gateway(rows):
    _, flagged = classify([tup(a, b, c, 0.5) for a, b, c in rows], GW)
    assert all(GW[a] != GW[b] for a, b in flagged)


def test_distinct_tuples_keep_best_occurrence():
    ts = [tup(14, 2, 2, 0.6, 1.0), tup(14, 2, 15, 0.3, 2.0), tup(14, 2, 15, 0.4, 3.0),
          tup(14, 2, 2, 0.6, 0.5)]
    d = distinct_tuples(ts)
    assert d == [ts[3], ts[2]]
    per_node = top_sets_by_node(ts, 1, distinct=True)
    assert per_node == {14: [ts[3]]}
    assert top_sets_by_node(ts, 2, distinct=True)[14] == [ts[3], ts[2]]


def _model_and_pairs():
    toks = ["+", "r", "n14", "n2", "n15", "n6", "udp", "s0", "-------"]
    vocab = build_vocabulary(toks)
    rng = np.random.default_rng(0)
    model = Seq2Seq(ModelParams.init(len(vocab), 6, rng), vocab)
    ev = lambda k, a, b: vocab.encode([k, a, b, "udp", "s0", "-------"])
    target = EventSequence(tuple(ev("+", "n14", "n2") + ev("r", "n6", "n15")), "udp", (1.0, 2.0),
                           times=(1.0, 2.0), endpoints=((14, 2), (6, 15)))
    src = EventSequence(tuple(ev("+", "n14", "n2")), "udp", (0.0, 0.0), (0.0,), ((14, 2),))
    return model, [SequencePair(src, target)]


def test_extract_node_tuples_reads_dest_slot():
    model, pairs = _model_and_pairs()
    model.params.out_W[...] = 0
    model.params.out_b[...] = 0
    model.params.out_b[model.vocab.index("n15")] = 5.0
    tuples, skipped = extract_node_tuples(model, pairs)
    assert skipped == 0
    assert [t.as_row() for t in tuples] == [(14, 2, 15), (6, 15, 15)]
    assert [t.time for t in tuples] == [1.0, 2.0]
    assert tuples[0].probability == pytest.approx(np.exp(5) / (np.exp(5) + len(model.vocab) - 1))
    assert extract_node_tuples(model, [])[0] == []


def test_extract_skips_non_node_guess():
    model, pairs = _model_and_pairs()
    model.params.out_W[...] = 0
    model.params.out_b[...] = 0
    model.params.out_b[model.vocab.index("udp")] = 5.0
    tuples, skipped = extract_node_tuples(model, pairs)
    assert tuples == [] and skipped == 2


def test_accuracy_and_self_comparison():
    model, pairs = _model_and_pairs()
    model.params.out_b[model.vocab.index("n15")] = 5.0
    with pytest.raises(DetectionError):
        accuracy(model, [])
    rep = compare_models(model, model, pairs, pairs, GW, k=5)
    assert rep.degradation == 0.0
    assert rep.attack.shortfall == 3
    ev = evaluate_model(model, pairs, GW, k=1)
    assert len(ev.set_A) == 1 and ev.shortfall == 0
    assert "size of set A: 5" in rep.to_text()
    assert compare_models(model, model, pairs, pairs, GW).to_json() == rep.to_json()


def test_accuracy_is_mean_of_pair_scores():
    model, pairs = _model_and_pairs()
    rep = accuracy(model, pairs * 3)
    assert rep.mean == sum(rep.scores) / 3
