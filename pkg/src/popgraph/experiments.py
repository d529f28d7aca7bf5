"""Fold preparation and the scratch-vs-fine-tune label-ratio protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cohort import Cohort, Fold, FoldPlan, NormStats, interpolate_cohort, normalize_continuous, subsample_labels
from .graph import DEFAULT_K, knn_graph, partition_subgraphs, similarity_matrix
from .masking import MaskSpec
from .metrics import aggregate_folds
from .model import ModelConfig, NodeBatch
from .train import (
    GraphBatch,
    PretrainResult,
    TaskResult,
    TrainConfig,
    config_fingerprint,
    init_finetune,
    preset_train_config,
    run_pretraining,
    run_task_training,
    scratch_params,
)

log = logging.getLogger(__name__)

DEFAULT_LABEL_RATIOS = (0.01, 0.05, 0.10, 0.50, 1.00)


@dataclass
class FoldData:
    fold: Fold
    graphs: list[GraphBatch]
    labels: dict[str, int]
    norm_stats: NormStats


def prepare_cohort(cohort: Cohort) -> Cohort:
    """Interpolate missing measurements; static-only cohorts pass through."""
    if cohort.schema.timeseries_features:
        return interpolate_cohort(cohort)
    return cohort


def build_fold_data(cohort: Cohort, fold: Fold, k: int = DEFAULT_K, group_size: int = 500, seed: int = 0) -> FoldData:
    """Normalise with train statistics, partition into subgraphs and build a k-NN graph per group."""
    normed, stats = normalize_continuous(cohort, fold.train_ids)
    schema = cohort.schema
    train, val, test = set(fold.train_ids), set(fold.val_ids), set(fold.test_ids)
    graphs = []
    for ids in partition_subgraphs(normed.ids, fold, group_size, seed):
        arrays = normed.arrays(ids)
        graph = knn_graph(similarity_matrix(schema, arrays), ids, min(k, len(ids) - 1))
        graphs.append(
            GraphBatch(
                ids=list(ids),
                batch=NodeBatch.from_arrays(arrays, schema, graph),
                measured=arrays["measured"],
                train=np.array([i in train for i in ids]),
                val=np.array([i in val for i in ids]),
                test=np.array([i in test for i in ids]),
            )
        )
    return FoldData(fold, graphs, cohort.labels(), stats)


@dataclass(frozen=True)
class Protocol:
    """Everything needed to run pre-training, scratch and fine-tune on one fold."""

    model: ModelConfig
    pretrain: TrainConfig
    scratch: TrainConfig
    finetune: TrainConfig
    finetune_low_label: TrainConfig | None = None  # used at label ratio <= 1%
    k: int = DEFAULT_K
    group_size: int = 500

    def task_config(self, mode: str, ratio: float) -> TrainConfig:
        if mode == "scratch":
            return replace(self.scratch, label_ratio=ratio)
        if ratio <= 0.01 and self.finetune_low_label is not None:
            return replace(self.finetune_low_label, label_ratio=ratio)
        return replace(self.finetune, label_ratio=ratio)


def full_protocol(cohort: Cohort, preset: str, mask: MaskSpec | None = None, **model_overrides) -> Protocol:
    model = ModelConfig.from_schema(cohort.schema, **model_overrides)
    return Protocol(
        model,
        preset_train_config(preset, "pretrain", mask=mask),
        preset_train_config(preset, "scratch"),
        preset_train_config(preset, "finetune", 1.0),
        preset_train_config(preset, "finetune", 0.01),
    )


def desk_protocol(cohort: Cohort, preset: str, mask: MaskSpec | None = None, **model_overrides) -> Protocol:
    """Shortened schedules with larger learning rates and a small model, for CPU runs."""
    dims = dict(d_discrete=16, d_continuous=16, d_ts_model=32, d_ts_out=32, ffn_multiplier=2, num_graphormer_layers=2)
    dims.update(model_overrides)
    model = ModelConfig.from_schema(cohort.schema, **dims)
    if preset == "static":
        mask = mask or MaskSpec("static_random", 0.3)
        return Protocol(
            model,
            TrainConfig("pretrain", 300, 3e-3, 1e-3, "poly", mask=mask),
            TrainConfig("scratch", 150, 3e-3, 1e-3, "poly"),
            TrainConfig("finetune", 150, 1e-3, 1e-3, "constant"),
            TrainConfig("finetune", 60, 1e-3, 1e-3, "constant"),
        )
    mask = mask or MaskSpec("feature_masking", 0.3)
    return Protocol(
        model,
        TrainConfig("pretrain", 150, 3e-3, 1e-3, "poly", mask=mask),
        TrainConfig("scratch", 120, 1e-3, 1e-3, "constant"),
        TrainConfig("finetune", 80, 5e-4, 5e-4, "constant"),
    )


def pretrain_fold(fd: FoldData, cohort: Cohort, protocol: Protocol, seed: int) -> PretrainResult:
    return run_pretraining(fd.graphs, cohort.schema, protocol.model, protocol.pretrain, seed)


def task_fold(
    fd: FoldData,
    cohort: Cohort,
    protocol: Protocol,
    mode: str,
    ratio: float,
    seed: int,
    pretrained=None,
    label_seed: int | None = None,
) -> TaskResult:
    """Scratch or fine-tune run; ``label_seed`` (default ``seed``) picks the labelled subset."""
    labeled = subsample_labels(fd.fold.train_ids, fd.labels, ratio, seed if label_seed is None else label_seed)
    fp = config_fingerprint(protocol.model, cohort.schema)
    if mode == "finetune":
        if pretrained is None:
            raise ValueError("fine-tuning needs a pre-trained checkpoint")
        params = init_finetune(pretrained, protocol.model, seed, cohort.schema)
    else:
        params = scratch_params(protocol.model, seed)
    return run_task_training(fd.graphs, fd.labels, labeled, params, protocol.model, protocol.task_config(mode, ratio), fp)


@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)  # one per (ratio, arm, seed, fold)

    def cell(self, ratio: float, arm: str, metric: str):
        vals = [r[metric] for r in self.rows if r["ratio"] == ratio and r["arm"] == arm]
        return aggregate_folds(vals, f"{arm}:{metric}")

    def arms(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["arm"] not in seen:
                seen.append(r["arm"])
        return seen

    def table_csv(self) -> str:
        arms = self.arms()
        ratios = sorted({r["ratio"] for r in self.rows})
        lines = ["ratio,metric," + ",".join(arms)]
        for ratio in ratios:
            for metric, key in (("ACC", "test_acc"), ("AUC", "test_auc")):
                cells = [self.cell(ratio, arm, key).formatted() for arm in arms]
                lines.append(f"{ratio:g},{metric}," + ",".join(cells))
        return "\n".join(lines) + "\n"


def label_draw_seed(seed: int, draw: int) -> int:
    return seed if draw == 0 else seed * 1000 + draw


def label_sweep(
    cohort: Cohort,
    plan: FoldPlan,
    protocol: Protocol,
    ratios: Sequence[float] = DEFAULT_LABEL_RATIOS,
    seeds: Sequence[int] = (0,),
    masks: dict[str, MaskSpec] | None = None,
    label_draws: int = 1,
) -> SweepResult:
    """SC vs FT per label ratio; folds, graphs and pre-training shared across ratios.

    ``masks`` maps an arm suffix to a mask spec, e.g. {"BM": ..., "FM": ...};
    by default one ``FT`` arm uses the protocol's pre-training mask.
    With ``label_draws`` > 1 every ratio below 1 is repeated over that many
    labelled subsets; both arms see the same subsets.
    """
    cohort = prepare_cohort(cohort)
    masks = masks or {"": protocol.pretrain.mask}
    result = SweepResult()
    for seed in seeds:
        for f_idx, fold in enumerate(plan.folds):
            fd = build_fold_data(cohort, fold, protocol.k, protocol.group_size, seed)
            pretrained = {}
            for tag, spec in masks.items():
                proto = replace(protocol, pretrain=replace(protocol.pretrain, mask=spec))
                pretrained[tag] = pretrain_fold(fd, cohort, proto, seed).best
            for ratio in ratios:
                for draw in range(label_draws if ratio < 1 else 1):
                    lseed = label_draw_seed(seed, draw)
                    tags = {"ratio": ratio, "seed": seed, "fold": f_idx, "draw": draw}
                    sc = task_fold(fd, cohort, protocol, "scratch", ratio, seed, label_seed=lseed)
                    result.rows.append({**tags, "arm": "SC", **sc.metrics})
                    for tag, ckpt in pretrained.items():
                        ft = task_fold(fd, cohort, protocol, "finetune", ratio, seed, ckpt, label_seed=lseed)
                        result.rows.append({**tags, "arm": f"FT:{tag}" if tag else "FT", **ft.metrics})
                log.info("seed %d fold %d ratio %g done", seed, f_idx, ratio)
    return result


def label_ratio_gains(
    seeds: Sequence[int],
    n: int = 300,
    ratios: Sequence[float] = (0.01, 1.0),
    label_draws: int = 1,
    preset: str = "static",
    protocol_fn=desk_protocol,
) -> dict[float, list[float]]:
    """Per-seed test-AUC gain of fine-tuning over scratch, for each label ratio.

    Each seed gets its own synthetic cohort, one 80/10/10 holdout split and one
    pre-training run; gains are averaged over the label draws.
    """
    from .cohort import FoldScheme, make_folds, synthesize_cohort

    gains: dict[float, list[float]] = {r: [] for r in ratios}
    for seed in seeds:
        cohort = synthesize_cohort(seed, n, preset)
        plan = make_folds(cohort.ids, FoldScheme("holdout", repeats=1), seed)
        sweep = label_sweep(cohort, plan, protocol_fn(cohort, preset), ratios, (seed,), label_draws=label_draws)
        for r in ratios:
            gains[r].append(sweep.cell(r, "FT", "test_auc").mean - sweep.cell(r, "SC", "test_auc").mean)
    return gains
