"""Patient records, cohort files, preprocessing, folds and a synthetic generator."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

TS_KINDS = ("continuous_measurement", "binary_treatment")


@dataclass(frozen=True)
class DiscreteFeature:
    name: str
    vocab_size: int
    is_medical: bool = True
    margin: int = 0
    use_as_input: bool = True


@dataclass(frozen=True)
class ContinuousFeature:
    name: str
    is_medical: bool = True
    use_as_input: bool = True


@dataclass(frozen=True)
class TimeseriesFeature:
    name: str
    kind: str = "continuous_measurement"


@dataclass(frozen=True)
class FeatureSchema:
    discrete_features: tuple[DiscreteFeature, ...] = ()
    continuous_features: tuple[ContinuousFeature, ...] = ()
    timeseries_features: tuple[TimeseriesFeature, ...] = ()
    series_length: int = 1
    num_classes: int = 2
    task_name: str = "task"

    def __post_init__(self):
        names = [f.name for f in self.discrete_features + self.continuous_features + self.timeseries_features]
        if len(set(names)) != len(names):
            raise ValidationError("feature names must be unique")
        for f in self.discrete_features:
            if f.vocab_size < 2:
                raise ValidationError(f"{f.name}: vocab_size must be >= 2")
            if not 0 <= f.margin < f.vocab_size:
                raise ValidationError(f"{f.name}: margin must lie in [0, vocab_size)")
        for f in self.timeseries_features:
            if f.kind not in TS_KINDS:
                raise ValidationError(f"{f.name}: unknown time-series kind {f.kind!r}")
        if self.series_length < 1:
            raise ValidationError("series_length must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")

    # index helpers -----------------------------------------------------
    @property
    def input_discrete(self) -> list[int]:
        return [i for i, f in enumerate(self.discrete_features) if f.use_as_input]

    @property
    def input_continuous(self) -> list[int]:
        return [i for i, f in enumerate(self.continuous_features) if f.use_as_input]

    @property
    def measurement_idx(self) -> list[int]:
        return [i for i, f in enumerate(self.timeseries_features) if f.kind == "continuous_measurement"]

    @property
    def treatment_idx(self) -> list[int]:
        return [i for i, f in enumerate(self.timeseries_features) if f.kind == "binary_treatment"]

    def discrete_index(self, name: str) -> int:
        return next(i for i, f in enumerate(self.discrete_features) if f.name == name)

    def continuous_index(self, name: str) -> int:
        return next(i for i, f in enumerate(self.continuous_features) if f.name == name)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        try:
            return cls(
                discrete_features=tuple(DiscreteFeature(**f) for f in d.get("discrete_features", [])),
                continuous_features=tuple(ContinuousFeature(**f) for f in d.get("continuous_features", [])),
                timeseries_features=tuple(TimeseriesFeature(**f) for f in d.get("timeseries_features", [])),
                series_length=int(d.get("series_length", 1)),
                num_classes=int(d["num_classes"]),
                task_name=str(d.get("task_name", "task")),
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"schema: {exc}") from exc


@dataclass
class PatientRecord:
    """One patient. Unmeasured time-series cells hold NaN until interpolated."""

    id: str
    discrete: np.ndarray
    continuous: np.ndarray
    timeseries: np.ndarray
    measured: np.ndarray
    label: int | None = None

    def to_json(self) -> dict:
        ts = [[None if not m else float(v) for v, m in zip(row, mrow)] for row, mrow in zip(self.timeseries, self.measured)]
        return {
            "id": self.id,
            "discrete": [int(v) for v in self.discrete],
            "continuous": [float(v) for v in self.continuous],
            "timeseries": ts,
            "measured": [[int(m) for m in row] for row in self.measured],
            "label": self.label,
        }


@dataclass
class Cohort:
    schema: FeatureSchema
    records: list[PatientRecord]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {r.id: i for i, r in enumerate(self.records)}
        if len(self._index) != len(self.records):
            raise ValidationError("record ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def positions(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self._index[i] for i in ids], dtype=np.int64)

    def record(self, rid: str) -> PatientRecord:
        return self.records[self._index[rid]]

    def labels(self) -> dict[str, int]:
        return {r.id: r.label for r in self.records if r.label is not None}

    def with_records(self, records: list[PatientRecord]) -> "Cohort":
        return Cohort(self.schema, records, dict(self.provenance))

    def arrays(self, ids: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        recs = self.records if ids is None else [self.record(i) for i in ids]
        s = self.schema
        n = len(recs)
        return {
            "discrete": np.array([r.discrete for r in recs], dtype=np.int64).reshape(n, len(s.discrete_features)),
            "continuous": np.array([r.continuous for r in recs], dtype=np.float64).reshape(n, len(s.continuous_features)),
            "timeseries": np.array([r.timeseries for r in recs], dtype=np.float64).reshape(
                n, len(s.timeseries_features), s.series_length
            ),
            "measured": np.array([r.measured for r in recs], dtype=bool).reshape(
                n, len(s.timeseries_features), s.series_length
            ),
        }


def validate_record(rec: PatientRecord, schema: FeatureSchema) -> None:
    def fail(fieldname, msg):
        raise ValidationError(f"record {rec.id!r} field {fieldname!r}: {msg}")

    if rec.discrete.shape != (len(schema.discrete_features),):
        fail("discrete", f"expected {len(schema.discrete_features)} values")
    for f, v in zip(schema.discrete_features, rec.discrete):
        if not 0 <= v < f.vocab_size:
            fail(f.name, f"value {v} outside [0, {f.vocab_size})")
    if rec.continuous.shape != (len(schema.continuous_features),):
        fail("continuous", f"expected {len(schema.continuous_features)} values")
    if not np.all(np.isfinite(rec.continuous)):
        fail("continuous", "non-finite value")
    shape = (len(schema.timeseries_features), schema.series_length)
    if rec.timeseries.shape != shape or rec.measured.shape != shape:
        fail("timeseries", f"expected shape {shape}")
    if np.any(~np.isfinite(rec.timeseries) & rec.measured):
        fail("timeseries", "measured cell is missing")
    if rec.label is not None and not 0 <= rec.label < schema.num_classes:
        fail("label", f"{rec.label} outside [0, {schema.num_classes})")


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------


def _parse_record(obj: dict, schema: FeatureSchema, lineno: int) -> PatientRecord:
    try:
        rid = str(obj["id"])
        s, tau = len(schema.timeseries_features), schema.series_length
        ts_raw = obj.get("timeseries", [])
        ms_raw = obj.get("measured", [])
        if len(ts_raw) != s or any(len(row) != tau for row in ts_raw):
            raise ParseError(f"line {lineno}: field 'timeseries' must be {s} arrays of {tau} values")
        if len(ms_raw) != s or any(len(row) != tau for row in ms_raw):
            raise ParseError(f"line {lineno}: field 'measured' must be {s} arrays of {tau} values")
        ts = np.array([[np.nan if v is None else float(v) for v in row] for row in ts_raw], dtype=np.float64).reshape(s, tau)
        measured = np.array(ms_raw, dtype=bool).reshape(s, tau)
        ts[~measured] = np.nan
        label = obj.get("label")
        return PatientRecord(
            id=rid,
            discrete=np.array(obj.get("discrete", []), dtype=np.int64),
            continuous=np.array(obj.get("continuous", []), dtype=np.float64),
            timeseries=ts,
            measured=measured,
            label=None if label is None else int(label),
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"line {lineno}: {exc}") from exc


def load_cohort(schema_path, records_path) -> Cohort:
    """Read a JSON schema and a JSON Lines record file into a validated cohort."""
    try:
        schema_obj = json.loads(Path(schema_path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{schema_path}: line {exc.lineno}: {exc.msg}") from exc
    schema = FeatureSchema.from_dict(schema_obj)
    records = []
    with open(records_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{records_path}: line {lineno}: {exc.msg}") from exc
            rec = _parse_record(obj, schema, lineno)
            validate_record(rec, schema)
            records.append(rec)
    return Cohort(schema, records, {"source_path": str(records_path)})


def write_cohort(cohort: Cohort, schema_path, records_path) -> None:
    Path(schema_path).write_text(json.dumps(cohort.schema.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(records_path, "w") as fh:
        for rec in cohort.records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def interpolate_timeseries(record: PatientRecord, schema: FeatureSchema, fill_means=None) -> PatientRecord:
    """Linear interpolation of unmeasured measurement cells.

    Edges are extended with the nearest measured value. Treatments are never
    interpolated: unmeasured treatment cells become 0. A measurement with no
    measured cell at all is filled with ``fill_means[s]`` and a warning.
    """
    ts = record.timeseries.copy()
    hours = np.arange(schema.series_length)
    for s, feat in enumerate(schema.timeseries_features):
        m = record.measured[s]
        if feat.kind == "binary_treatment":
            ts[s, ~m] = 0.0
        elif m.all():
            continue
        elif m.any():
            ts[s, ~m] = np.interp(hours[~m], hours[m], ts[s, m])
        else:
            fill = 0.0 if fill_means is None else float(fill_means[s])
            warnings.warn(f"record {record.id}: feature {feat.name} has no measurements, filled with {fill}")
            ts[s, :] = fill
    return replace(record, timeseries=ts)


def interpolate_cohort(cohort: Cohort) -> Cohort:
    arr = cohort.arrays()
    vals = np.where(arr["measured"], arr["timeseries"], 0.0)
    counts = arr["measured"].sum(axis=(0, 2))
    means = vals.sum(axis=(0, 2)) / np.maximum(counts, 1)
    return cohort.with_records([interpolate_timeseries(r, cohort.schema, means) for r in cohort.records])


@dataclass
class NormStats:
    features: tuple[int, ...]
    mins: np.ndarray
    maxs: np.ndarray
    fitted_on: tuple[str, ...]
    degenerate: tuple[int, ...] = ()

    def transform(self, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=np.float64, copy=True)
        for j, f in enumerate(self.features):
            span = self.maxs[j] - self.mins[j]
            if span <= 0:
                out[..., f] = 0.0
            else:
                out[..., f] = np.clip((out[..., f] - self.mins[j]) / span, 0.0, 1.0)
        return out

    def inverse(self, values: np.ndarray, feature: int) -> np.ndarray:
        j = self.features.index(feature)
        return np.asarray(values) * (self.maxs[j] - self.mins[j]) + self.mins[j]

    def scale(self, feature: int) -> float:
        j = self.features.index(feature)
        return float(self.maxs[j] - self.mins[j])


def fit_norm_stats(records: Sequence[PatientRecord], schema: FeatureSchema) -> NormStats:
    feats = tuple(schema.input_continuous)
    data = np.array([r.continuous for r in records], dtype=np.float64).reshape(len(records), -1)
    if feats and len(records):
        mins, maxs = data[:, feats].min(axis=0), data[:, feats].max(axis=0)
    else:
        mins, maxs = np.zeros(len(feats)), np.zeros(len(feats))
    degenerate = tuple(f for f, lo, hi in zip(feats, mins, maxs) if hi <= lo)
    for f in degenerate:
        warnings.warn(f"continuous feature {schema.continuous_features[f].name} is constant on train; set to 0.0")
    return NormStats(feats, mins, maxs, tuple(r.id for r in records), degenerate)


def normalize_continuous(cohort: Cohort, train_ids: Sequence[str]) -> tuple[Cohort, NormStats]:
    """Min-max scale input continuous features with train-only statistics."""
    stats = fit_norm_stats([cohort.record(i) for i in train_ids], cohort.schema)
    recs = [replace(r, continuous=stats.transform(r.continuous)) for r in cohort.records]
    return cohort.with_records(recs), stats


# ---------------------------------------------------------------------------
# synthetic cohorts
# ---------------------------------------------------------------------------

STATIC_COGNITIVE = (("cdrsb", 19), ("adas13", 31), ("mmse", 31), ("faq", 31))
STATIC_IMAGING = ("ventricles", "hippocampus", "whole_brain", "entorhinal", "fdg")


def default_margin(vocab_size: int) -> int:
    return max(1, int(math.floor(0.05 * vocab_size + 0.5)))


def static_schema(cognitive=STATIC_COGNITIVE, imaging=STATIC_IMAGING) -> FeatureSchema:
    discrete = [
        DiscreteFeature("apoe4", 3, is_medical=True, margin=0),
        DiscreteFeature("gender", 2, is_medical=False, margin=0, use_as_input=False),
    ]
    discrete += [DiscreteFeature(name, v, is_medical=True, margin=default_margin(v)) for name, v in cognitive]
    continuous = [ContinuousFeature("age", is_medical=False, use_as_input=False)]
    continuous += [ContinuousFeature(name, is_medical=True) for name in imaging]
    return FeatureSchema(tuple(discrete), tuple(continuous), (), 1, 3, "diagnosis")


def timeseries_schema(n_measurements: int = 8, n_treatments: int = 4, series_length: int = 24) -> FeatureSchema:
    ts = [TimeseriesFeature(f"meas_{i}", "continuous_measurement") for i in range(n_measurements)]
    ts += [TimeseriesFeature(f"treat_{i}", "binary_treatment") for i in range(n_treatments)]
    return FeatureSchema((), (), tuple(ts), series_length, 2, "los_gt_3d")


def synthesize_cohort(
    seed: int,
    n: int,
    preset: str = "static",
    *,
    mode_mass: float = 0.7,
    noise_frac: float = 0.15,
    ar_phi: float = 0.8,
    measured_p: float = 0.7,
    label_flip: float = 0.1,
    **schema_knobs,
) -> Cohort:
    """Deterministic cohort with a latent cluster per patient.

    Labels are the cluster with ``label_flip`` probability of being replaced
    by a different class drawn uniformly.
    """
    if n < 20:
        raise ConfigError(f"synthetic cohorts need at least 20 patients, got {n}")
    if preset == "static":
        schema = static_schema(**schema_knobs)
    elif preset == "timeseries":
        schema = timeseries_schema(**schema_knobs)
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    rng = np.random.default_rng(seed)
    L = schema.num_classes
    z = rng.integers(0, L, size=n)

    # cluster-level parameters
    modes = [rng.choice(f.vocab_size, size=L, replace=f.vocab_size < L) for f in schema.discrete_features]
    cont_means = rng.uniform(0.0, 1.0, size=(len(schema.continuous_features), L))
    S, tau = len(schema.timeseries_features), schema.series_length
    base = rng.normal(0.0, 1.0, size=(S, L))
    slope = rng.normal(0.0, 0.05, size=(S, L))
    treat_p = rng.uniform(0.1, 0.6, size=(S, L))

    records = []
    hours = np.arange(tau) - (tau - 1) / 2.0
    for i in range(n):
        c = z[i]
        disc = np.empty(len(schema.discrete_features), dtype=np.int64)
        for k, f in enumerate(schema.discrete_features):
            if f.name == "gender":
                disc[k] = rng.integers(0, f.vocab_size)
            elif rng.random() < mode_mass:
                disc[k] = modes[k][c]
            else:
                others = np.delete(np.arange(f.vocab_size), modes[k][c])
                disc[k] = rng.choice(others)
        cont = np.empty(len(schema.continuous_features))
        for j, f in enumerate(schema.continuous_features):
            if f.name == "age":
                cont[j] = np.round(rng.normal(65.0 + 5.0 * c, 6.0))
            else:
                spread = cont_means[j].max() - cont_means[j].min()
                cont[j] = rng.normal(cont_means[j, c], noise_frac * max(spread, 1e-3))
        ts = np.zeros((S, tau))
        measured = np.ones((S, tau), dtype=bool)
        for s, f in enumerate(schema.timeseries_features):
            if f.kind == "binary_treatment":
                ts[s] = (rng.random(tau) < treat_p[s, c]).astype(np.float64)
                continue
            noise = np.empty(tau)
            noise[0] = rng.normal(0.0, 0.3 / np.sqrt(1 - ar_phi**2))
            for h in range(1, tau):
                noise[h] = ar_phi * noise[h - 1] + rng.normal(0.0, 0.3)
            ts[s] = base[s, c] + slope[s, c] * hours + noise
            measured[s] = rng.random(tau) < measured_p
            ts[s, ~measured[s]] = np.nan
        label = int(c)
        if rng.random() < label_flip:
            label = int(rng.choice(np.delete(np.arange(L), c)))
        records.append(PatientRecord(f"p{i:05d}", disc, cont, ts, measured, label))
    return Cohort(schema, records, {"generator_seed": seed, "preset": preset, "n": n})


# ---------------------------------------------------------------------------
# folds and label subsampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class FoldScheme:
    kind: str = "kfold"  # "kfold" or "holdout"
    k: int = 10
    repeats: int = 6
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    @classmethod
    def parse(cls, text: str) -> "FoldScheme":
        """``kfold:10`` or ``holdout:6`` or ``holdout:6:0.8/0.1/0.1``."""
        parts = text.split(":")
        if parts[0] == "kfold" and len(parts) == 2:
            return cls("kfold", k=int(parts[1]))
        if parts[0] == "holdout" and len(parts) in (2, 3):
            fr = (0.8, 0.1, 0.1) if len(parts) == 2 else tuple(float(x) for x in parts[2].split("/"))
            return cls("holdout", repeats=int(parts[1]), fractions=fr)
        raise ConfigError(f"cannot parse fold scheme {text!r}")

    def __str__(self) -> str:
        if self.kind == "kfold":
            return f"kfold:{self.k}"
        return f"holdout:{self.repeats}:" + "/".join(repr(f) for f in self.fractions)


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    scheme: FoldScheme


def make_folds(ids: Sequence[str], scheme: FoldScheme, seed: int) -> FoldPlan:
    """K-fold uses fold i as test and fold i+1 as validation."""
    ids = list(ids)
    n = len(ids)
    rng = np.random.default_rng(seed)
    folds = []
    if scheme.kind == "kfold":
        if n < scheme.k or scheme.k < 2:
            raise ConfigError(f"kfold({scheme.k}) needs 2 <= k <= N={n}")
        order = [ids[i] for i in rng.permutation(n)]
        chunks = [tuple(c) for c in np.array_split(np.array(order, dtype=object), scheme.k)]
        for i in range(scheme.k):
            test, val = chunks[i], chunks[(i + 1) % scheme.k]
            train = tuple(x for j, c in enumerate(chunks) if j not in (i, (i + 1) % scheme.k) for x in c)
            folds.append(Fold(train, tuple(val), tuple(test)))
    elif scheme.kind == "holdout":
        fr = scheme.fractions
        if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
            raise ConfigError(f"split fractions {fr} must be three non-negative values summing to 1")
        n_train = int(math.floor(fr[0] * n + 0.5))
        n_val = int(math.floor(fr[1] * n + 0.5))
        for _ in range(scheme.repeats):
            order = [ids[i] for i in rng.permutation(n)]
            folds.append(Fold(tuple(order[:n_train]), tuple(order[n_train : n_train + n_val]), tuple(order[n_train + n_val :])))
    else:
        raise ConfigError(f"unknown fold scheme {scheme.kind!r}")
    return FoldPlan(tuple(folds), scheme)


def subsample_labels(train_ids: Sequence[str], labels: Mapping[str, int], ratio: float, seed: int) -> list[str]:
    """Stratified draw of ceil(ratio * |train|) labelled ids, at least one per class present."""
    if not 0 < ratio <= 1:
        raise ConfigError(f"label ratio must be in (0, 1], got {ratio}")
    train_ids = [i for i in train_ids if i in labels]
    if ratio >= 1.0:
        return list(train_ids)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for i in train_ids:
        by_class.setdefault(labels[i], []).append(i)
    classes = sorted(by_class)
    n = len(train_ids)
    target = max(int(math.ceil(ratio * n - 1e-9)), len(classes))
    quota = {c: target * len(by_class[c]) / n for c in classes}
    alloc = {c: min(len(by_class[c]), max(1, int(math.floor(quota[c])))) for c in classes}
    while sum(alloc.values()) < target:
        c = max((c for c in classes if alloc[c] < len(by_class[c])), key=lambda c: (quota[c] - alloc[c], -c))
        alloc[c] += 1
    while sum(alloc.values()) > target:
        c = max((c for c in classes if alloc[c] > 1), key=lambda c: (alloc[c] - quota[c], -c))
        alloc[c] -= 1
    chosen = []
    for c in classes:
        members = by_class[c]
        pick = rng.choice(len(members), size=alloc[c], replace=False)
        chosen.extend(members[j] for j in sorted(pick))
    order = {i: k for k, i in enumerate(train_ids)}
    return sorted(chosen, key=order.__getitem__)
