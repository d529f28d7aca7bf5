import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgraph.errors import ConfigError, EmptyEval, UndefinedMetric
from popgraph.metrics import (
    accuracy,
    aggregate_folds,
    binary_auc,
    f1_binary,
    margin_accuracy,
    reports_table,
    reports_to_csv,
    rmse_masked,
    roc_auc,
    task_auc,
)


def pairs_auc(scores, labels):
    """All-pairs counting oracle: correctly ordered (pos, neg) pairs, ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    good = 0.0
    for p in pos:
        for n in neg:
            good += 1.0 if p > n else 0.5 if p == n else 0.0
    return good / (len(pos) * len(neg))


def test_accuracy():
    assert accuracy([0, 1, 2], [0, 1, 1]) == pytest.approx(2 / 3)
    with pytest.raises(EmptyEval):
        accuracy([], [])


def test_auc_hand_example():
    assert binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert binary_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(UndefinedMetric):
        binary_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_oracle_1000_instances():
    rng = np.random.default_rng(0)
    for i in range(1000):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.normal(size=n)
        if i % 2:
            s = np.round(s, 1)  # ties
        assert abs(binary_auc(s, y) - pairs_auc(s, y)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=30), st.integers(0, 10**6))
def test_auc_invariant_to_monotone_transform(scores, seed):
    y = np.random.default_rng(seed).integers(0, 2, size=len(scores))
    y[0], y[1] = 0, 1
    s = np.array(scores, dtype=np.float64)
    # integer scores keep the cubic map strictly increasing in floating point
    assert binary_auc(s, y) == binary_auc(s**3 + 7.0, y)


def test_macro_ovr():
    probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.7, 0.2, 0.1]])
    assert roc_auc(probs, [0, 1, 2, 0], "macro_ovr") == 1.0
    # class 2 absent from labels: averaged over present classes only
    assert task_auc(probs, [0, 1, 1, 0]) == pytest.approx(np.mean([binary_auc(probs[:, c], np.array([0, 1, 1, 0]) == c) for c in (0, 1)]))
    assert task_auc(np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1]) == 1.0
    with pytest.raises(ValueError):
        roc_auc(probs, [0, 1, 2, 0], "micro")


def test_rmse_f1():
    assert rmse_masked([3.0, 4.0, 100.0], [0.0, 0.0, 0.0], [1, 1, 0]) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(EmptyEval):
        rmse_masked([1.0], [1.0], [0])
    assert f1_binary([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
    assert f1_binary([0, 0], [0, 0]) == 0.0


def test_margin_accuracy():
    pred = np.array([[3, 10], [5, 10]])
    true = np.array([[4, 10], [8, 12]])
    assert margin_accuracy(pred, true, [1, 2]) == 0.75
    assert margin_accuracy(pred, true, [1, 2], eligible=[[1, 0], [0, 1]]) == 1.0
    with pytest.raises(ConfigError):
        margin_accuracy(pred, true, [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=40), st.integers(0, 10**6))
def test_margin_zero_equals_accuracy(pred, seed):
    true = np.random.default_rng(seed).integers(0, 10, size=len(pred))
    assert margin_accuracy(np.array(pred), true, [0]) == accuracy(np.array(pred), true)


def test_aggregation():
    r = aggregate_folds([0.70, 0.72], "acc")
    assert r.formatted() == "71.00 ± 1.00"
    assert aggregate_folds([70.0, 72.0]).formatted(percent=False) == "71.00 ± 1.00"
    with pytest.raises(EmptyEval):
        aggregate_folds([])
    csv_text = reports_to_csv([r])
    assert csv_text.splitlines()[0] == "metric,n_folds,mean,std,values"
    assert csv_text.splitlines()[1].startswith("acc,2,")
    assert "71.00 ± 1.00" in reports_table([r])
