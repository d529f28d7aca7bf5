import json
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popgraph import cohort as co
from popgraph.cohort import (
    FoldScheme,
    PatientRecord,
    interpolate_timeseries,
    load_cohort,
    make_folds,
    normalize_continuous,
    subsample_labels,
    synthesize_cohort,
    write_cohort,
)
from popgraph.errors import ConfigError, ParseError, ValidationError

FIXTURE_SCHEMA = {
    "discrete_features": [{"name": "apoe4", "vocab_size": 3, "is_medical": True, "margin": 0, "use_as_input": True}],
    "continuous_features": [{"name": "hippo", "is_medical": True, "use_as_input": True}],
    "timeseries_features": [{"name": "hr", "kind": "continuous_measurement"}, {"name": "vent", "kind": "binary_treatment"}],
    "series_length": 3,
    "num_classes": 2,
    "task_name": "t",
}


def _fixture_lines():
    return [
        {"id": "a", "discrete": [0], "continuous": [1.5], "timeseries": [[1.0, None, 3.0], [0, 1, 1]], "measured": [[1, 0, 1], [1, 1, 1]], "label": 0},
        {"id": "b", "discrete": [2], "continuous": [2.5], "timeseries": [[None, 5.0, None], [1, 0, 0]], "measured": [[0, 1, 0], [1, 1, 1]], "label": 1},
        {"id": "c", "discrete": [1], "continuous": [0.5], "timeseries": [[2.0, 2.0, 2.0], [0, 0, 0]], "measured": [[1, 1, 1], [1, 1, 1]], "label": None},
    ]


@pytest.fixture
def fixture_files(tmp_path):
    sp, rp = tmp_path / "schema.json", tmp_path / "records.jsonl"
    sp.write_text(json.dumps(FIXTURE_SCHEMA))
    rp.write_text("\n".join(json.dumps(r) for r in _fixture_lines()) + "\n")
    return sp, rp


def test_load_fixture(fixture_files):
    c = load_cohort(*fixture_files)
    assert len(c) == 3 and c.ids == ["a", "b", "c"]
    assert np.isnan(c.record("a").timeseries[0, 1])
    assert c.record("a").measured[0].tolist() == [True, False, True]
    assert c.labels() == {"a": 0, "b": 1}


def test_load_rejects_out_of_vocab(fixture_files, tmp_path):
    sp, rp = fixture_files
    lines = _fixture_lines()
    lines[1]["discrete"] = [3]
    rp.write_text("\n".join(json.dumps(r) for r in lines))
    with pytest.raises(ValidationError, match="'b'"):
        load_cohort(sp, rp)


def test_load_rejects_tau_mismatch(fixture_files):
    sp, rp = fixture_files
    lines = _fixture_lines()
    lines[0]["timeseries"] = [[1.0, 2.0], [0, 1]]
    rp.write_text("\n".join(json.dumps(r) for r in lines))
    with pytest.raises(ParseError, match="line 1"):
        load_cohort(sp, rp)


def test_load_rejects_bad_json(fixture_files):
    sp, rp = fixture_files
    rp.write_text(json.dumps(_fixture_lines()[0]) + "\n{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        load_cohort(sp, rp)


def test_round_trip_files(tmp_path):
    c = synthesize_cohort(3, 25, "timeseries")
    write_cohort(c, tmp_path / "s.json", tmp_path / "r.jsonl")
    back = load_cohort(tmp_path / "s.json", tmp_path / "r.jsonl")
    assert back.schema == c.schema
    for a, b in zip(c.records, back.records):
        assert a.id == b.id and a.label == b.label
        np.testing.assert_array_equal(a.measured, b.measured)
        np.testing.assert_array_equal(a.timeseries, b.timeseries)  # NaN positions equal too


def _ts_record(values, measured, kinds=("continuous_measurement",)):
    schema = co.FeatureSchema(timeseries_features=tuple(co.TimeseriesFeature(f"f{i}", k) for i, k in enumerate(kinds)), series_length=len(values[0]))
    ts = np.array(values, dtype=float)
    m = np.array(measured, dtype=bool)
    ts[~m] = np.nan
    return PatientRecord("x", np.zeros(0, dtype=np.int64), np.zeros(0), ts, m), schema


def test_interpolate_interior():
    rec, schema = _ts_record([[0.0, 0, 0, 0, 4.0]], [[1, 0, 0, 0, 1]])
    out = interpolate_timeseries(rec, schema)
    assert out.timeseries[0, 2] == 2.0
    np.testing.assert_array_equal(out.timeseries[0], [0, 1, 2, 3, 4])


def test_interpolate_identity_and_edges():
    rec, schema = _ts_record([[1.0, 2.0, 3.0]], [[1, 1, 1]])
    np.testing.assert_array_equal(interpolate_timeseries(rec, schema).timeseries, rec.timeseries)
    vals = np.zeros((1, 24))
    vals[0, 5] = 7.0
    meas = np.zeros((1, 24))
    meas[0, 5] = 1
    rec, schema = _ts_record(vals, meas)
    assert np.all(interpolate_timeseries(rec, schema).timeseries == 7.0)


def test_interpolate_treatments_zero_and_empty_feature_warning():
    rec, schema = _ts_record([[1.0, 1.0, 1.0], [0, 0, 0]], [[0, 1, 0], [0, 0, 0]], ("binary_treatment", "continuous_measurement"))
    with pytest.warns(UserWarning, match="no measurements"):
        out = interpolate_timeseries(rec, schema, fill_means=[0.0, 9.0])
    np.testing.assert_array_equal(out.timeseries[0], [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(out.timeseries[1], [9.0, 9.0, 9.0])
    np.testing.assert_array_equal(out.measured, rec.measured)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.booleans()), min_size=2, max_size=30))
def test_interpolation_preserves_measured_cells(cells):
    values = [[v for v, _ in cells]]
    measured = [[m for _, m in cells]]
    if not any(measured[0]):
        measured[0][0] = True
    rec, schema = _ts_record(values, measured)
    out = interpolate_timeseries(rec, schema)
    m = rec.measured
    assert out.timeseries[m].tobytes() == rec.timeseries[m].tobytes()
    assert np.all(np.isfinite(out.timeseries))


def _static_cohort(values):
    schema = co.FeatureSchema(continuous_features=(co.ContinuousFeature("v"),), num_classes=2)
    recs = [PatientRecord(f"r{i}", np.zeros(0, dtype=np.int64), np.array([v]), np.zeros((0, 1)), np.zeros((0, 1), bool)) for i, v in enumerate(values)]
    return co.Cohort(schema, recs)


def test_normalize_min_max_and_clamp():
    c = _static_cohort([2.0, 4.0, 6.0, 8.0])
    normed, stats = normalize_continuous(c, ["r0", "r1", "r2"])
    assert [r.continuous[0] for r in normed.records] == [0.0, 0.5, 1.0, 1.0]
    assert stats.fitted_on == ("r0", "r1", "r2")
    assert stats.inverse(np.array([0.5]), 0)[0] == 4.0


def test_normalize_constant_feature_warns():
    c = _static_cohort([3.0, 3.0, 5.0])
    with pytest.warns(UserWarning, match="constant"):
        normed, _ = normalize_continuous(c, ["r0", "r1"])
    assert all(r.continuous[0] == 0.0 for r in normed.records)


def test_normalize_reads_only_train_records(monkeypatch):
    c = synthesize_cohort(1, 40, "static")
    seen = []
    orig = co.Cohort.record

    def spy(self, rid):
        seen.append(rid)
        return orig(self, rid)

    monkeypatch.setattr(co.Cohort, "record", spy)
    train = c.ids[:30]
    normalize_continuous(c, train)
    assert set(seen) <= set(train)


def test_synthesize_deterministic():
    a, b = synthesize_cohort(7, 100, "static"), synthesize_cohort(7, 100, "static")
    for x, y in zip(a.records, b.records):
        assert x.label == y.label
        assert x.discrete.tobytes() == y.discrete.tobytes()
        assert x.continuous.tobytes() == y.continuous.tobytes()
    with pytest.raises(ConfigError):
        synthesize_cohort(0, 5, "static")


def test_synthesize_measured_fraction():
    c = synthesize_cohort(11, 500, "timeseries")
    m = c.arrays()["measured"][:, c.schema.measurement_idx]
    assert abs(m.mean() - 0.7) <= 0.03


@pytest.mark.parametrize("preset", ["static", "timeseries"])
def test_synthesize_clusters_recoverable(preset):
    from sklearn.cluster import KMeans

    c = synthesize_cohort(5, 300, preset, label_flip=0.0)
    arr = c.arrays()
    if preset == "static":
        feats = np.hstack([arr["discrete"][:, c.schema.input_discrete], arr["continuous"][:, c.schema.input_continuous]])
    else:
        filled = co.interpolate_cohort(c).arrays()["timeseries"]
        feats = filled.mean(axis=2)
    feats = (feats - feats.mean(0)) / (feats.std(0) + 1e-12)
    L = c.schema.num_classes
    assign = KMeans(L, n_init=10, random_state=0).fit_predict(feats)
    labels = np.array([r.label for r in c.records])
    purity = sum(Counter(labels[assign == k]).most_common(1)[0][1] for k in set(assign)) / len(labels)
    assert purity > 1.0 / L + 0.2


def test_folds_kfold_singletons_and_cover():
    ids = [f"i{k}" for k in range(10)]
    plan = make_folds(ids, FoldScheme("kfold", k=10), 0)
    assert all(len(f.test_ids) == 1 for f in plan.folds)
    assert sorted(x for f in plan.folds for x in f.test_ids) == sorted(ids)
    for f in plan.folds:
        assert sorted(f.train_ids + f.val_ids + f.test_ids) == sorted(ids)


def test_folds_holdout_sizes_and_determinism():
    ids = [f"i{k}" for k in range(100)]
    plan = make_folds(ids, FoldScheme("holdout", repeats=6), 3)
    assert len(plan.folds) == 6
    assert all((len(f.train_ids), len(f.val_ids), len(f.test_ids)) == (80, 10, 10) for f in plan.folds)
    assert plan == make_folds(ids, FoldScheme("holdout", repeats=6), 3)
    with pytest.raises(ConfigError):
        make_folds(ids, FoldScheme("holdout", repeats=2, fractions=(0.8, 0.1, 0.2)), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 80), st.integers(2, 10), st.integers(0, 10**6), st.sampled_from(["kfold", "holdout"]))
def test_no_fold_leakage(n, k, seed, kind):
    ids = [f"i{j}" for j in range(n)]
    plan = make_folds(ids, FoldScheme(kind, k=min(k, n), repeats=3), seed)
    for f in plan.folds:
        parts = [set(f.train_ids), set(f.val_ids), set(f.test_ids)]
        assert sum(len(p) for p in parts) == len(set().union(*parts))


def test_subsample_identity_and_ceiling():
    ids = [f"i{j}" for j in range(200)]
    labels = {i: j % 2 for j, i in enumerate(ids)}
    assert subsample_labels(ids, labels, 1.0, 0) == ids
    out = subsample_labels(ids, labels, 0.01, 0)
    assert len(out) == 2 and {labels[i] for i in out} == {0, 1}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=5, max_size=120), st.sampled_from([0.01, 0.05, 0.1, 0.5, 0.77]), st.integers(0, 1000))
def test_subsample_stratification(classes, ratio, seed):
    ids = [f"i{j}" for j in range(len(classes))]
    labels = dict(zip(ids, classes))
    out = subsample_labels(ids, labels, ratio, seed)
    present = Counter(classes)
    import math

    expected_total = max(math.ceil(ratio * len(ids) - 1e-9), len(present))
    assert len(out) == expected_total
    assert len(set(out)) == len(out) and set(out) <= set(ids)
    got = Counter(labels[i] for i in out)
    props = {c: expected_total * n_c / len(ids) for c, n_c in present.items()}
    # each class lifted to the one-label minimum takes at most one label from the others
    lifted = sum(1 for p in props.values() if p < 1)
    for c, prop in props.items():
        assert got[c] >= 1
        # proportional allocation, within one count apart from the minimum's displacement
        assert got[c] <= max(1, math.ceil(prop)) + 1 and got[c] >= math.floor(prop) - 1 - lifted
