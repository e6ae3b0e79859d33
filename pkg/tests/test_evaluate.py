import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xote.evaluate import EvalReport, exact_span_f1
from xote.iob import TargetSpan

from oracles import brute_force_match, perturbed, random_spans


def T(a, b):
    return TargetSpan(a, b)


def test_identity():
    gold = {"a": [T(0, 3), T(5, 9)], "b": [T(1, 2)]}
    r = exact_span_f1(gold, gold)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_hand_case():
    r = exact_span_f1({"a": [T(0, 3), T(5, 9)]}, {"a": [T(5, 9)]})
    assert r.precision == 1.0 and r.recall == 0.5
    assert abs(r.f1 - 2 / 3) < 1e-9


def test_empty_prediction():
    r = exact_span_f1({"a": [T(0, 3)]}, {"a": []})
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)
    r = exact_span_f1({"a": []}, {"a": []})
    assert r.f1 == 0.0


def test_off_by_one_gets_no_credit():
    gold = {"a": [T(4, 13)]}
    for p in (T(3, 13), T(4, 12), T(5, 13), T(4, 14)):
        assert exact_span_f1(gold, {"a": [p]}).true_positives == 0


def test_surface_ignored_and_duplicates_counted_once(caplog):
    r = exact_span_f1({"a": [TargetSpan(0, 3, "abc")]}, {"a": [T(0, 3), T(0, 3)]})
    assert (r.true_positives, r.predicted_count) == (1, 1)
    with caplog.at_level(logging.WARNING):
        r = exact_span_f1({"a": [T(0, 3), T(0, 3)]}, {"a": []})
    assert r.gold_count == 1 and "duplicate" in caplog.text


def test_mismatched_ids():
    with pytest.raises(ValueError, match="b"):
        exact_span_f1({"a": []}, {"b": []})


def test_serialisation():
    r = EvalReport(1, 1, 2)
    assert r.to_tsv().split("\t")[:3] == ["1", "1", "2"]
    assert json.loads(r.to_json())["recall"] == 0.5


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    gold = {str(i): random_spans(rng) for i in range(n)}
    pred = {k: perturbed(rng, v) for k, v in gold.items()}
    r = exact_span_f1(gold, pred)
    assert (r.true_positives, r.predicted_count, r.gold_count) == brute_force_match(gold, pred)
    assert r.true_positives <= min(r.predicted_count, r.gold_count)
    if r.precision + r.recall > 0:
        assert min(r.precision, r.recall) - 1e-12 <= r.f1 <= max(r.precision, r.recall) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_micro_aggregation(seed):
    rng = np.random.default_rng(seed)
    g1 = {f"x{i}": random_spans(rng) for i in range(3)}
    g2 = {f"y{i}": random_spans(rng) for i in range(3)}
    p1 = {k: perturbed(rng, v) for k, v in g1.items()}
    p2 = {k: perturbed(rng, v) for k, v in g2.items()}
    assert exact_span_f1({**g1, **g2}, {**p1, **p2}) == exact_span_f1(g1, p1) + exact_span_f1(g2, p2)
