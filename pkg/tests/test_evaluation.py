import json
import statistics

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import cohen_kappa_score

from conftest import r3, solve_counts
from llmscreen.corpus import GroundTruth, Record
from llmscreen.evaluation import (
    ConfusionMatrix,
    DegenerateVariance,
    MissingDecision,
    RecordSetMismatch,
    cohen_kappa,
    compute_metrics,
    evaluate_source,
    kappa_from_vectors,
    pearson_r,
    r_squared,
    round_half_away,
    rows_to_csv,
    rows_to_json,
    tabulate_confusion,
)
from llmscreen.protocol import Verdict
from llmscreen.reference import SUBSET_RESULTS, column_from_counts, subset_fixture

I, E = Verdict.INCLUDE, Verdict.EXCLUDE
INC, EXC = GroundTruth.INCLUDED, GroundTruth.EXCLUDED


# counts solved once by the brute-force oracle (tests/conftest.py), frozen here
SUBSET_COUNTS = {
    "Alpha": (202, 69, 509, 20),
    "Bravo": (195, 76, 510, 19),
    "Charlie": (210, 61, 505, 24),
    "GPT-3.5": (271, 0, 208, 321),
    "GPT-4o": (247, 24, 474, 55),
    "Gemini 1.5 Pro": (206, 65, 499, 30),
    "LLaMA 3": (236, 35, 357, 172),
    "Sonnet 3.5": (222, 49, 511, 18),
}


@pytest.mark.parametrize("name", sorted(SUBSET_COUNTS))
def test_frozen_counts_match_oracle(name):
    assert solve_counts(SUBSET_RESULTS[name], 271, 529) == [SUBSET_COUNTS[name]]


def test_gpt4_row_has_no_integer_solution():
    # printed BA 0.857 disagrees with (0.605 + 0.975) / 2 = 0.790
    assert solve_counts(SUBSET_RESULTS["GPT-4"], 271, 529) == []


@pytest.mark.parametrize("name", sorted(SUBSET_COUNTS))
def test_metrics_reproduce_subset_rows(name):
    tp, fn, tn, fp = SUBSET_COUNTS[name]
    rep = compute_metrics(ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn))
    assert tuple(rep.rounded().values()) == SUBSET_RESULTS[name]


def test_gpt35_row():
    rep = compute_metrics(ConfusionMatrix(tp=271, fn=0, tn=208, fp=321))
    assert rep.rounded() == {
        "sensitivity": 1.0, "specificity": 0.393, "balanced_accuracy": 0.697,
        "precision": 0.458, "npv": 1.0, "f1": 0.628,
    }
    assert not rep.zero_positive_rule_applied


def test_zero_positive_rule():
    rep = compute_metrics(ConfusionMatrix(tp=0, fn=0, tn=23, fp=0))
    assert rep.sensitivity == 1.0 and rep.zero_positive_rule_applied
    assert rep.specificity == 1.0
    assert rep.precision is None and rep.f1 is None
    assert rep.npv == 1.0


def test_undefined_metrics():
    rep = compute_metrics(ConfusionMatrix(tp=0, fn=5, tn=0, fp=0))
    assert rep.specificity is None and rep.balanced_accuracy is None
    assert rep.precision is None
    assert rep.npv == 0.0
    assert rep.f1 == 0.0


cms = st.builds(ConfusionMatrix, *(st.integers(0, 500) for _ in range(4)))


@given(cms)
def test_metric_identities(cm):
    rep = compute_metrics(cm)
    if rep.specificity is not None:
        assert rep.balanced_accuracy == pytest.approx((rep.sensitivity + rep.specificity) / 2)
    if rep.precision is not None and not rep.zero_positive_rule_applied and rep.precision + rep.sensitivity > 0:
        assert rep.f1 == pytest.approx(2 * rep.precision * rep.sensitivity / (rep.precision + rep.sensitivity))
    for v in rep.as_dict().values():
        assert v is None or 0 <= v <= 1


def test_round_half_away():
    assert round_half_away(0.0005) == 0.001
    assert round_half_away(0.6965) == 0.697
    assert round_half_away(0.8085) == 0.809
    assert round(0.8085, 3) == 0.808  # what the builtin would have printed
    assert round_half_away(None) is None


# tabulation ---------------------------------------------------------------


def _truth(n_pos, n_neg):
    return {f"p{i}": INC for i in range(n_pos)} | {f"n{i}": EXC for i in range(n_neg)}


def test_all_include_screener():
    truth = _truth(271, 529)
    cm = tabulate_confusion({k: I for k in truth}, truth)
    assert cm == ConfusionMatrix(tp=271, tn=0, fp=529, fn=0)
    assert r3(compute_metrics(cm).precision) == 0.339


def test_perfect_screener():
    truth = _truth(10, 20)
    cm = tabulate_confusion({k: I if v is INC else E for k, v in truth.items()}, truth)
    assert cm.fp == cm.fn == 0


def test_gpt35_fixture_tabulates():
    records = subset_fixture()
    truth = {r.record_id: r.ground_truth for r in records}
    cm = tabulate_confusion(column_from_counts(records, 271, 321), truth)
    assert cm == ConfusionMatrix(tp=271, tn=208, fp=321, fn=0)


def test_missing_decision():
    truth = _truth(2, 2)
    with pytest.raises(MissingDecision) as exc:
        tabulate_confusion({"p0": I, "p1": I, "n0": E}, truth, source="s")
    assert exc.value.record_ids == ["n1"]


@given(st.lists(st.tuples(st.booleans(), st.booleans()), max_size=60))
def test_margins_independent_of_screener(pairs):
    truth = {str(i): INC if t else EXC for i, (t, _) in enumerate(pairs)}
    dec = {str(i): I if d else E for i, (_, d) in enumerate(pairs)}
    cm = tabulate_confusion(dec, truth)
    assert cm.positives == sum(t for t, _ in pairs)
    assert cm.negatives == sum(not t for t, _ in pairs)
    assert cm.n == len(pairs)


# kappa --------------------------------------------------------------------


def test_kappa_identical():
    assert kappa_from_vectors([I, E, I, I], [I, E, I, I]).kappa == 1.0


def test_kappa_complete_disagreement():
    rep = kappa_from_vectors([I, I, E, E], [E, E, I, I])
    assert rep.observed_agreement == 0 and rep.expected_agreement == 0.5
    assert rep.kappa == pytest.approx(-1.0, abs=1e-12)


def test_kappa_half():
    rep = kappa_from_vectors([I, E, I, E], [I, E, E, E])
    # po = 3/4; pA(I) = 1/2, pB(I) = 1/4 -> pe = 1/8 + 3/8 = 1/2
    assert rep.observed_agreement == 0.75
    assert rep.expected_agreement == pytest.approx(0.5, abs=1e-12)
    assert rep.kappa == pytest.approx(0.5, abs=1e-12)


def test_kappa_degenerate():
    assert kappa_from_vectors([I, I], [I, I]).kappa == 1.0
    # pe < 1 whenever the raters differ on a binary task, so the
    # degenerate branch is reachable only through a constant pair
    assert not kappa_from_vectors([I, I], [E, E]).degenerate


def test_kappa_record_set_mismatch():
    with pytest.raises(RecordSetMismatch):
        cohen_kappa({"a": I, "b": E}, {"a": I, "c": E})


verdict_vectors = st.integers(2, 50).flatmap(
    lambda n: st.tuples(st.lists(st.sampled_from([I, E]), min_size=n, max_size=n),
                        st.lists(st.sampled_from([I, E]), min_size=n, max_size=n))
)


@given(verdict_vectors)
def test_kappa_symmetric_and_matches_sklearn(pair):
    a, b = pair
    ab, ba = kappa_from_vectors(a, b), kappa_from_vectors(b, a)
    assert ab.kappa == ba.kappa or (ab.kappa is not None and ab.kappa == pytest.approx(ba.kappa, abs=1e-12))
    if ab.expected_agreement < 1:
        ref = cohen_kappa_score([v.value for v in a], [v.value for v in b])
        assert ab.kappa == pytest.approx(ref, abs=1e-12)


# correlation --------------------------------------------------------------


def test_pearson_perfect():
    xs = [1, 2, 3, 4, 5]
    assert pearson_r(xs, [2 * x + 1 for x in xs]) == pytest.approx(1.0)
    assert pearson_r(xs, [-x for x in xs]) == pytest.approx(-1.0)


def test_pearson_hand_computed():
    # means 2.5, 2.5; sum dx*dy = 3; sum dx^2 = sum dy^2 = 5 -> r = 3/5
    assert pearson_r([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)
    assert r_squared([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.36, abs=1e-12)
    assert r_squared([1, 2, 3], [3, 5, 7]) == pytest.approx(1.0)


def test_degenerate_variance():
    with pytest.raises(DegenerateVariance):
        r_squared([1, 2, 3], [4, 4, 4])
    with pytest.raises(ValueError):
        pearson_r([1], [2])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=30), st.floats(0.1, 10), finite)
def test_pearson_affine_invariance(points, scale, shift):
    xs, ys = zip(*points)
    if np.std(xs) < 1e-3 or np.std(ys) < 1e-3:
        return
    r = pearson_r(xs, ys)
    assert r == pytest.approx(statistics.correlation(xs, ys), abs=1e-9)
    assert pearson_r([scale * x + shift for x in xs], ys) == pytest.approx(r, abs=1e-9)
    assert pearson_r([-x for x in xs], ys) == pytest.approx(-r, abs=1e-9)


# reports ------------------------------------------------------------------


def _records():
    out = []
    for review, labels in {"a": [INC, EXC, EXC], "b": [EXC, EXC]}.items():
        for i, gt in enumerate(labels):
            out.append(Record(f"{review}{i}", review, "t", "x", 2020, (), gt))
    return out


def test_per_review_rows_and_zero_positive():
    records = _records()
    dec = {"a0": I, "a1": E, "a2": I, "b0": E, "b1": E}
    pooled = evaluate_source("s", dec, records)
    assert len(pooled) == 1 and pooled[0].review_id == "*"
    rows = evaluate_source("s", dec, records, per_review=True)
    assert [r.review_id for r in rows] == ["a", "b"]
    assert rows[1].metrics.zero_positive_rule_applied
    assert rows[1].metrics.sensitivity == 1.0


def test_csv_and_json_reports():
    rows = [r.as_dict() for r in evaluate_source("s", {"a0": I, "a1": E, "a2": I, "b0": E, "b1": E}, _records(), True)]
    text = rows_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "source,review_id,tp,tn,fp,fn,sensitivity,specificity,balanced_accuracy,precision,npv,f1,zero_positive_rule_applied"
    assert lines[2] == "s,b,0,2,0,0,1.000,1.000,1.000,,1.000,,true"
    data = json.loads(rows_to_json(rows))
    assert data[1]["precision"] is None and data[1]["zero_positive_rule_applied"] is True
