import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import rankdata

from oracles import pairwise_auc
from tcseizure.metrics import (
    ConfusionMatrix,
    EvalReport,
    SingleClass,
    method_report,
    rates,
    roc_auc,
)


def test_rate_examples():
    r = rates(ConfusionMatrix(tp=92, fn=8, tn=95, fp=5))
    assert r["sensitivity"] == pytest.approx(0.92) and r["specificity"] == pytest.approx(0.95)
    assert r["fpr"] == pytest.approx(0.05) and r["accuracy"] == pytest.approx(187 / 200)
    perfect = rates(ConfusionMatrix(tp=3, tn=4))
    assert perfect == {"accuracy": 1.0, "sensitivity": 1.0, "specificity": 1.0, "fpr": 0.0}


def test_absent_rates():
    r = rates(ConfusionMatrix(tn=5))
    assert r["sensitivity"] is None and r["specificity"] == 1.0
    assert rates(ConfusionMatrix())["accuracy"] is None
    with pytest.raises(ValueError):
        ConfusionMatrix(tp=-1)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=80))
def test_rates_recompose(pairs):
    truth, pred = map(np.array, zip(*pairs))
    cm = ConfusionMatrix.from_labels(truth, pred)
    assert cm.total == len(pairs)
    r = rates(cm)
    if r["sensitivity"] is not None and r["specificity"] is not None:
        prev = truth.mean()
        assert r["accuracy"] == pytest.approx(r["sensitivity"] * prev + r["specificity"] * (1 - prev))
        assert r["fpr"] == pytest.approx(1 - r["specificity"])
    assert cm.as_counts() == [[cm.tn, cm.fp], [cm.fn, cm.tp]]


def test_auc_examples():
    assert roc_auc([0.9, 0.1, 0.2], [1, 0, 0]) == 1.0
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])


scores_labels = st.integers(2, 120).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0]) | st.floats(0, 1)),
    arrays(np.int8, n, elements=st.integers(0, 1)),
))


@given(scores_labels)
def test_auc_matches_pairwise_oracle(sl):
    s, y = sl
    if y.min() == y.max():
        y[0] = 1 - y[0]
    assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12


@given(scores_labels)
def test_auc_invariant_under_monotone_transform(sl):
    s, y = sl
    if y.min() == y.max():
        y[0] = 1 - y[0]
    # dense ranks keep order strictly (plain float maps can merge tiny neighbors)
    ranks = rankdata(s, method="dense")
    assert roc_auc(np.exp(ranks / len(s)) - 7, y) == roc_auc(s, y)


def test_random_instances_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 50))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12


def test_method_report_and_serialization():
    truth = np.array([0, 0, 1, 1, 0])
    rep = method_report(truth, [0, 1, 1, 0, 0], [0.1, 0.6, 0.9, 0.4, 0.2], [1.5, None, 2.5])
    assert rep.confusion == [[2, 1], [1, 1]]
    assert rep.mean_delay_s == 2.0 and rep.missed_seizures == 1
    assert rep.auc == pytest.approx(pairwise_auc([0.1, 0.6, 0.9, 0.4, 0.2], truth))
    no_pos = method_report([0, 0], [0, 1], [0.2, 0.3])
    assert no_pos.auc is None and no_pos.sensitivity is None
    ev = EvalReport({"sma": rep, "hmm": rep}, {"P01": {"sma": rep, "hmm": rep}})
    d = json.loads(ev.to_json())
    assert d["methods"]["sma"]["confusion"] == [[2, 1], [1, 1]]
    rows = ev.to_csv().splitlines()
    assert rows[0].startswith("patient,method,accuracy") and len(rows) == 5
    assert ev.auc_boxplot_csv().splitlines()[0] == "patient,hmm,sma"
    table = ev.table()
    assert "Sensitivity [%]" in table and "AUC score" in table
