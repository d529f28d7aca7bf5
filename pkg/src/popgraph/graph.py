"""Patient similarity, k-NN population graphs and Graphormer structural tensors."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .cohort import Cohort, FeatureSchema, Fold, PatientRecord
from .errors import ConfigError, SchemaError

DEFAULT_K = 5
D_MAX = 5
EDGE_BINS = 8


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# static (imaging / cognitive / demographic) similarity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaticLayout:
    apoe4: int
    gender: int
    age: int
    cognitive: tuple[int, ...]
    imaging: tuple[int, ...]

    @classmethod
    def from_schema(cls, schema: FeatureSchema) -> "StaticLayout":
        try:
            apoe4 = schema.discrete_index("apoe4")
            gender = schema.discrete_index("gender")
            age = schema.continuous_index("age")
        except StopIteration:
            raise SchemaError("static similarity needs discrete 'apoe4', 'gender' and continuous 'age'") from None
        cognitive = tuple(i for i, f in enumerate(schema.discrete_features) if f.is_medical and i != apoe4)
        imaging = tuple(i for i, f in enumerate(schema.continuous_features) if f.is_medical)
        return cls(apoe4, gender, age, cognitive, imaging)


@dataclass(frozen=True)
class CognitiveStats:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, discrete: np.ndarray, layout: StaticLayout) -> "CognitiveStats":
        cog = discrete[:, list(layout.cognitive)].astype(np.float64)
        return cls(cog.min(axis=0), cog.max(axis=0))

    def scaled(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return (np.asarray(values, dtype=np.float64) - self.lo) / span


def sim_demographic(rec_i: PatientRecord, rec_j: PatientRecord, layout: StaticLayout) -> float:
    hits = int(rec_i.discrete[layout.apoe4] == rec_j.discrete[layout.apoe4])
    hits += int(rec_i.discrete[layout.gender] == rec_j.discrete[layout.gender])
    hits += int(abs(rec_i.continuous[layout.age] - rec_j.continuous[layout.age]) <= 2)
    return hits / 3.0


def cognitive_similarity_from_diffs(diffs: np.ndarray) -> float:
    diffs = np.asarray(diffs, dtype=np.float64)
    return 1.0 - np.sqrt((diffs * diffs).sum()) / np.sqrt(diffs.size)


def sim_cognitive(rec_i: PatientRecord, rec_j: PatientRecord, layout: StaticLayout, stats: CognitiveStats) -> float:
    a = stats.scaled(rec_i.discrete[list(layout.cognitive)])
    b = stats.scaled(rec_j.discrete[list(layout.cognitive)])
    return float(cognitive_similarity_from_diffs(a - b))


def imaging_similarity_from_distance(d: float) -> float:
    return 2.0 * (1.0 - _sigmoid(d))


def sim_imaging(rec_i: PatientRecord, rec_j: PatientRecord, layout: StaticLayout) -> float:
    a = rec_i.continuous[list(layout.imaging)]
    b = rec_j.continuous[list(layout.imaging)]
    return float(imaging_similarity_from_distance(np.linalg.norm(a - b)))


def sim_static_overall(rec_i, rec_j, layout: StaticLayout, stats: CognitiveStats) -> float:
    parts = (
        sim_demographic(rec_i, rec_j, layout),
        sim_cognitive(rec_i, rec_j, layout, stats),
        sim_imaging(rec_i, rec_j, layout),
    )
    return sum(parts) / 3.0


def _pairwise_l2(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def static_similarity_matrix(discrete: np.ndarray, continuous: np.ndarray, layout: StaticLayout) -> np.ndarray:
    """Mean of demographic, cognitive and imaging similarity for every pair."""
    dem = (discrete[:, None, layout.apoe4] == discrete[None, :, layout.apoe4]).astype(np.float64)
    dem += discrete[:, None, layout.gender] == discrete[None, :, layout.gender]
    age = continuous[:, layout.age]
    dem += np.abs(age[:, None] - age[None, :]) <= 2
    dem /= 3.0

    if layout.cognitive:
        stats = CognitiveStats.fit(discrete, layout)
        cog = stats.scaled(discrete[:, list(layout.cognitive)])
        cog_sim = 1.0 - _pairwise_l2(cog) / np.sqrt(len(layout.cognitive))
    else:
        cog_sim = np.ones_like(dem)
    if layout.imaging:
        img_sim = imaging_similarity_from_distance(_pairwise_l2(continuous[:, list(layout.imaging)]))
    else:
        img_sim = np.ones_like(dem)
    sim = (dem + cog_sim + img_sim) / 3.0
    return 0.5 * (sim + sim.T)


# ---------------------------------------------------------------------------
# time-series descriptor similarity
# ---------------------------------------------------------------------------


def timeseries_descriptors(timeseries: np.ndarray, measured: np.ndarray, features: Sequence[int]):
    """(mean, population std, min, max) per feature over measured cells.

    Returns the (S_m, 4) descriptor array and a boolean flag per feature that
    is set when no cell was measured and the interpolated series was used.
    """
    out = np.zeros((len(features), 4))
    flagged = np.zeros(len(features), dtype=bool)
    for j, s in enumerate(features):
        m = measured[s]
        vals = timeseries[s, m] if m.any() else timeseries[s]
        flagged[j] = not m.any()
        std = vals.std() if vals.size >= 2 else 0.0
        out[j] = (vals.mean(), std, vals.min(), vals.max())
    return out, flagged


def descriptor_stats(descriptors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per (feature, component) mean and std across the cohort, std 0 -> 1."""
    mu = descriptors.mean(axis=0)
    sd = descriptors.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


def sim_timeseries(desc_i: np.ndarray, desc_j: np.ndarray, stats) -> float:
    mu, sd = stats
    zi, zj = (desc_i - mu) / sd, (desc_j - mu) / sd
    d = np.linalg.norm(zi - zj, axis=-1).mean()
    return 1.0 / (1.0 + d)


def timeseries_similarity_matrix(timeseries: np.ndarray, measured: np.ndarray, features: Sequence[int]) -> np.ndarray:
    if not features:
        raise SchemaError("time-series similarity needs at least one measurement feature")
    desc = np.stack([timeseries_descriptors(t, m, features)[0] for t, m in zip(timeseries, measured)])
    mu, sd = descriptor_stats(desc)
    z = (desc - mu) / sd
    n = len(z)
    d = np.zeros((n, n))
    for j in range(z.shape[1]):
        d += _pairwise_l2(z[:, j, :])
    d /= z.shape[1]
    sim = 1.0 / (1.0 + d)
    return 0.5 * (sim + sim.T)


def similarity_matrix(schema: FeatureSchema, arrays: dict) -> np.ndarray:
    """Dispatch on schema: time-series descriptors if measurements exist, else static."""
    if schema.measurement_idx:
        return timeseries_similarity_matrix(arrays["timeseries"], arrays["measured"], schema.measurement_idx)
    return static_similarity_matrix(arrays["discrete"], arrays["continuous"], StaticLayout.from_schema(schema))


# ---------------------------------------------------------------------------
# k-NN graph
# ---------------------------------------------------------------------------


@dataclass
class PopulationGraph:
    node_ids: list[str]
    src: np.ndarray
    dst: np.ndarray
    edge_similarity: np.ndarray
    in_degree: np.ndarray
    out_degree: np.ndarray
    spd: np.ndarray
    edge_bins: np.ndarray
    d_max: int = D_MAX

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def to_json(self) -> str:
        return json.dumps(
            {
                "node_ids": list(self.node_ids),
                "edges": [
                    {"src": int(s), "dst": int(d), "similarity": float(w), "bin": int(self.edge_bins[s, d])}
                    for s, d, w in zip(self.src, self.dst, self.edge_similarity)
                ],
                "in_degree": self.in_degree.tolist(),
                "out_degree": self.out_degree.tolist(),
                "spd": self.spd.tolist(),
                "d_max": self.d_max,
            },
            sort_keys=True,
        )


def topk_neighbors(sim: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most similar other nodes per row, ties to lower index."""
    n = sim.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, -sim[i, others]))
        out[i] = others[order[:k]]
    return out


def capped_spd(n: int, src: np.ndarray, dst: np.ndarray, d_max: int) -> np.ndarray:
    adj = csr_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    dist = shortest_path(adj, method="D", directed=False, unweighted=True)
    dist[~np.isfinite(dist)] = d_max + 1
    return np.minimum(dist, d_max + 1).astype(np.int64)


def similarity_bins(values: np.ndarray, bins: int = EDGE_BINS) -> np.ndarray:
    """Bins 1..bins uniform over [0, 1]; bin 0 is reserved for "no edge"."""
    v = np.clip(values, 0.0, 1.0)
    return 1 + np.minimum((v * bins).astype(np.int64), bins - 1)


def knn_graph(sim: np.ndarray, node_ids: Sequence[str], k: int = DEFAULT_K, d_max: int = D_MAX, bins: int = EDGE_BINS) -> PopulationGraph:
    n = sim.shape[0]
    if n < 2 or k < 1 or k >= n:
        raise ConfigError(f"k-NN needs 1 <= k < n (k={k}, n={n})")
    nbrs = topk_neighbors(sim, k)
    src = np.repeat(np.arange(n), k)
    dst = nbrs.reshape(-1)
    w = sim[src, dst]
    edge_bins = np.zeros((n, n), dtype=np.int64)
    edge_bins[src, dst] = similarity_bins(w, bins)
    return PopulationGraph(
        node_ids=list(node_ids),
        src=src,
        dst=dst,
        edge_similarity=w,
        in_degree=np.bincount(dst, minlength=n),
        out_degree=np.bincount(src, minlength=n),
        spd=capped_spd(n, src, dst, d_max),
        edge_bins=edge_bins,
        d_max=d_max,
    )


# ---------------------------------------------------------------------------
# subgraphs
# ---------------------------------------------------------------------------


def partition_subgraphs(ids: Sequence[str], fold: Fold | None, group_size: int = 500, seed: int = 0) -> list[list[str]]:
    """Random disjoint groups of at most ``group_size``, each mixing the splits.

    Every split is shuffled and spread evenly along one interleaved order,
    which is then cut into consecutive chunks.
    """
    if group_size < 2:
        raise ConfigError("group_size must be >= 2")
    rng = np.random.default_rng(seed)
    ids = list(ids)
    if fold is None:
        splits = [ids]
    else:
        member = set(ids)
        known = set(fold.train_ids) | set(fold.val_ids) | set(fold.test_ids)
        splits = [[i for i in part if i in member] for part in (fold.train_ids, fold.val_ids, fold.test_ids)]
        splits.append([i for i in ids if i not in known])
    keyed = []
    for part in splits:
        if not part:
            continue
        perm = rng.permutation(len(part))
        for rank, j in enumerate(perm):
            keyed.append(((rank + 0.5) / len(part), len(keyed), part[j]))
    order = [x[2] for x in sorted(keyed)]
    return [order[i : i + group_size] for i in range(0, len(order), group_size)]


def build_graph(cohort: Cohort, ids: Sequence[str], k: int = DEFAULT_K, d_max: int = D_MAX, bins: int = EDGE_BINS) -> PopulationGraph:
    arrays = cohort.arrays(ids)
    sim = similarity_matrix(cohort.schema, arrays)
    return knn_graph(sim, ids, min(k, len(ids) - 1), d_max, bins)
