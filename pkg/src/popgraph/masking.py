"""Masking strategies and the masked-imputation loss."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import FeatureSchema
from .errors import ConfigError, EmptyLossSupport
from .model import ImputationLayout, NodeBatch

STRATEGIES = ("static_random", "feature_masking", "block_masking")
_CLI_NAMES = {"static": "static_random", "fm": "feature_masking", "bm": "block_masking"}


@dataclass(frozen=True)
class MaskSpec:
    strategy: str = "static_random"
    ratio: float = 0.30
    block_len: int = 6
    per_feature_blocks: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown masking strategy {self.strategy!r}")
        if not 0 < self.ratio <= 1:
            raise ConfigError("mask ratio must lie in (0, 1]")
        if self.block_len < 1:
            raise ConfigError("block_len must be >= 1")

    @classmethod
    def from_cli(cls, name: str, ratio: float = 0.30, block_len: int = 6) -> "MaskSpec":
        if name not in _CLI_NAMES:
            raise ConfigError(f"--mask must be one of {sorted(_CLI_NAMES)}")
        return cls(_CLI_NAMES[name], ratio, block_len)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def n_to_mask(ratio: float, count: int) -> int:
    return max(1, round_half_up(ratio * count))


def patient_rng(seed: int, epoch: int, patient_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, zlib.crc32(patient_id.encode())])


def medical_static_slots(schema: FeatureSchema) -> list[tuple[str, int]]:
    """Maskable static slots as ("d", column) / ("c", column) in input-column space."""
    slots = [("d", j) for j, i in enumerate(schema.input_discrete) if schema.discrete_features[i].is_medical]
    slots += [("c", j) for j, i in enumerate(schema.input_continuous) if schema.continuous_features[i].is_medical]
    return slots


def mask_static_random(n_slots: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of the medical static slots to hide for one record."""
    if n_slots == 0:
        raise ConfigError("no medical static features to mask")
    return rng.choice(n_slots, size=min(n_slots, n_to_mask(ratio, n_slots)), replace=False)


def mask_features_FM(n_features: int, series_length: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """(S, tau) boolean mask hiding the full series of round(ratio*S) features."""
    mask = np.zeros((n_features, series_length), dtype=bool)
    chosen = rng.choice(n_features, size=min(n_features, n_to_mask(ratio, n_features)), replace=False)
    mask[chosen, :] = True
    return mask


def mask_block_BM(n_features: int, series_length: int, block_len: int, rng: np.random.Generator, per_feature: bool = False) -> np.ndarray:
    """(S, tau) boolean mask hiding one contiguous block of ``block_len`` hours in every feature."""
    if block_len > series_length:
        raise ConfigError(f"block_len {block_len} exceeds series length {series_length}")
    mask = np.zeros((n_features, series_length), dtype=bool)
    starts = rng.integers(0, series_length - block_len + 1, size=n_features if per_feature else 1)
    for s in range(n_features):
        start = starts[s if per_feature else 0]
        mask[s, start : start + block_len] = True
    return mask


@dataclass
class MaskedBatch:
    inputs: NodeBatch
    disc_mask: np.ndarray  # (N, D)
    disc_target: np.ndarray
    cont_mask: np.ndarray  # (N, C)
    cont_target: np.ndarray
    ts_mask: np.ndarray  # (N, S, tau)
    ts_target: np.ndarray
    ts_eligible: np.ndarray

    @property
    def mask_count(self) -> int:
        return int(self.disc_mask.sum() + self.cont_mask.sum() + self.ts_mask.sum())

    @property
    def eligible_count(self) -> int:
        return int(self.disc_mask.sum() + self.cont_mask.sum() + self.ts_eligible.sum())


def apply_mask_tokens(
    batch: NodeBatch,
    node_ids,
    measured: np.ndarray,
    schema: FeatureSchema,
    spec: MaskSpec,
    epoch: int,
    seed: int,
) -> MaskedBatch:
    """Mask every node of ``batch`` with an rng derived from (seed, epoch, patient id).

    Discrete values become the mask-token slot (index == vocab size),
    continuous values and time-series cells become 0, and time-series mask
    columns flag hidden cells. Time-series measurement targets are eligible
    for the loss only where they were actually measured.
    """
    n = batch.n
    D, C = batch.discrete.shape[1], batch.continuous.shape[1]
    S, tau = batch.ts_values.shape[1:]
    disc_mask = np.zeros((n, D), dtype=bool)
    cont_mask = np.zeros((n, C), dtype=bool)
    ts_mask = np.zeros((n, S, tau), dtype=bool)

    if spec.strategy == "static_random":
        slots = medical_static_slots(schema)
        if not slots:
            raise ConfigError("static masking needs medical static features in the schema")
    elif not S:
        raise ConfigError(f"{spec.strategy} needs time-series features in the schema")

    for i, pid in enumerate(node_ids):
        rng = patient_rng(seed, epoch, pid)
        if spec.strategy == "static_random":
            for j in mask_static_random(len(slots), spec.ratio, rng):
                kind, col = slots[j]
                (disc_mask if kind == "d" else cont_mask)[i, col] = True
        elif spec.strategy == "feature_masking":
            ts_mask[i] = mask_features_FM(S, tau, spec.ratio, rng)
        else:
            ts_mask[i] = mask_block_BM(S, tau, spec.block_len, rng, spec.per_feature_blocks)

    vocab = np.array([schema.discrete_features[i].vocab_size for i in schema.input_discrete], dtype=np.int64)
    discrete = np.where(disc_mask, vocab[None, :], batch.discrete) if D else batch.discrete.copy()
    continuous = np.where(cont_mask, 0.0, batch.continuous)
    ts_values = np.where(ts_mask, 0.0, batch.ts_values)
    masked_inputs = replace(
        batch, discrete=discrete, continuous=continuous, ts_values=ts_values, ts_mask_cols=ts_mask.astype(np.float64)
    )
    is_meas = np.zeros(S, dtype=bool)
    is_meas[schema.measurement_idx] = True
    eligible = ts_mask & (measured | ~is_meas[None, :, None])
    return MaskedBatch(
        masked_inputs,
        disc_mask,
        batch.discrete.copy(),
        cont_mask,
        batch.continuous.copy(),
        ts_mask,
        batch.ts_values.copy(),
        eligible,
    )


def _support(mask: np.ndarray, nodes: np.ndarray | None) -> np.ndarray:
    if nodes is None:
        return mask
    sel = nodes.reshape((-1,) + (1,) * (mask.ndim - 1))
    return mask & sel


def imputation_loss(
    predictions: Tensor,
    mb: MaskedBatch,
    layout: ImputationLayout,
    schema: FeatureSchema,
    nodes: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Sum of per-group means: CE (discrete), MSE (continuous + measurements), BCE (treatments).

    ``nodes`` optionally restricts the loss to a boolean subset of rows.
    Groups without eligible positions are left out.
    """
    terms: dict[str, Tensor] = {}

    disc = _support(mb.disc_mask, nodes)
    total = disc.sum()
    if total:
        parts = []
        for k, (off, vocab) in enumerate(zip(layout.discrete_offsets, layout.discrete_vocab)):
            cnt = disc[:, k].sum()
            if not cnt:
                continue
            logits = predictions[:, off : off + vocab]
            ce = ad.loss_primitive("cross_entropy", logits, mb.disc_target[:, k], disc[:, k])
            parts.append(ad.multiply(ce, cnt / total))
        terms["discrete"] = parts[0] if len(parts) == 1 else _sum(parts)

    meas = schema.measurement_idx
    cont_pred, cont_tgt, cont_w = [], [], []
    if layout.continuous_cols:
        cont_pred.append(predictions[:, list(layout.continuous_cols)])
        cont_tgt.append(mb.cont_target)
        cont_w.append(_support(mb.cont_mask, nodes))
    if meas:
        cols = layout.ts_columns(meas).reshape(-1)
        cont_pred.append(predictions[:, cols])
        cont_tgt.append(mb.ts_target[:, meas, :].reshape(len(mb.ts_target), -1))
        cont_w.append(_support(mb.ts_eligible[:, meas, :], nodes).reshape(len(mb.ts_target), -1))
    if cont_pred and sum(w.sum() for w in cont_w):
        pred = cont_pred[0] if len(cont_pred) == 1 else ad.concat_last_axis(cont_pred)
        terms["continuous"] = ad.loss_primitive(
            "mse", pred, np.concatenate(cont_tgt, axis=1), np.concatenate(cont_w, axis=1)
        )

    treat = schema.treatment_idx
    if treat:
        w = _support(mb.ts_eligible[:, treat, :], nodes).reshape(len(mb.ts_target), -1)
        if w.sum():
            cols = layout.ts_columns(treat).reshape(-1)
            tgt = mb.ts_target[:, treat, :].reshape(len(mb.ts_target), -1)
            terms["binary"] = ad.loss_primitive("binary_cross_entropy", predictions[:, cols], tgt, w)

    if not terms:
        raise EmptyLossSupport("no eligible masked positions in any loss group")
    loss = _sum(list(terms.values()))
    breakdown = {name: t.item() for name, t in terms.items()}
    breakdown["total"] = loss.item()
    return loss, breakdown


def _sum(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = ad.add(out, t)
    return out
