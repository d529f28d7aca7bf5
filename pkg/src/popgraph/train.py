"""Adam, learning-rate schedules, pre-training / task loops and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import FeatureSchema
from .errors import ConfigError, DivergenceError, FormatError, IncompatibleCheckpoint
from .masking import MaskSpec, apply_mask_tokens, imputation_loss
from .metrics import accuracy, f1_binary, margin_accuracy, rmse_masked, task_auc
from .model import (
    ENCODER,
    ImputationLayout,
    ModelConfig,
    NodeBatch,
    build_variant,
    decoder_forward,
    encoder_forward,
    init_head,
)

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls({n: np.zeros_like(p.data) for n, p in params.items()}, {n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every parameter, in place. Missing grads count as zero."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def poly_lr(epoch: int, epochs: int, lr_start: float, lr_end: float, power: float = 1.0) -> float:
    if epochs <= 1:
        return lr_start
    return lr_end + (lr_start - lr_end) * (1.0 - epoch / (epochs - 1)) ** power


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "scratch"  # pretrain | scratch | finetune
    epochs: int = 100
    lr_start: float = 1e-4
    lr_end: float = 1e-4
    schedule: str = "constant"  # constant | poly
    label_ratio: float = 1.0
    mask: MaskSpec | None = None

    def __post_init__(self):
        if self.mode not in ("pretrain", "scratch", "finetune"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.schedule not in ("constant", "poly"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def lr(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr_start
        return poly_lr(epoch, self.epochs, self.lr_start, self.lr_end)

    def scaled(self, factor: float) -> "TrainConfig":
        return replace(self, epochs=max(1, int(round(self.epochs * factor))))


def preset_train_config(preset: str, mode: str, label_ratio: float = 1.0, mask: MaskSpec | None = None) -> TrainConfig:
    """Published schedules for the static (4-layer) and time-series (8-layer) settings."""
    if preset == "static":
        if mode == "pretrain":
            return TrainConfig("pretrain", 6000, 1e-5, 1e-5, "constant", mask=mask or MaskSpec("static_random", 0.3))
        if mode == "scratch":
            return TrainConfig("scratch", 1200, 1e-5, 5e-6, "poly", label_ratio)
        epochs = 200 if label_ratio <= 0.01 else 1200
        return TrainConfig("finetune", epochs, 5e-6, 5e-6, "constant", label_ratio)
    if preset == "timeseries":
        if mode == "pretrain":
            return TrainConfig("pretrain", 3000, 1e-3, 1e-4, "poly", mask=mask or MaskSpec("feature_masking", 0.3))
        if mode == "scratch":
            return TrainConfig("scratch", 1100, 1e-4, 1e-4, "constant", label_ratio)
        return TrainConfig("finetune", 600, 1e-5, 1e-5, "constant", label_ratio)
    raise ConfigError(f"unknown preset {preset!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"POPGRAPH"
FORMAT_VERSION = 1


def config_fingerprint(config: ModelConfig, schema: FeatureSchema | None = None) -> str:
    """sha256 over the encoder-shaping model config and the schema's feature layout."""
    d = config.to_dict()
    d.pop("num_classes")
    if schema is not None:
        sd = schema.to_dict()
        sd.pop("num_classes")
        sd.pop("task_name")
        d["schema"] = sd
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    fingerprint: str
    tensors: dict[str, np.ndarray]
    adam: AdamState | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], fingerprint: str, adam=None, metrics=None) -> "Checkpoint":
        return cls(fingerprint, {n: p.data.copy() for n, p in params.items()}, adam, dict(metrics or {}))

    def params(self) -> dict[str, Tensor]:
        return {n: Tensor(a.copy(), requires_grad=True) for n, a in self.tensors.items()}


def _flatten_checkpoint(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{n}", a) for n, a in ckpt.tensors.items()]
    if ckpt.adam is not None:
        st = ckpt.adam
        items += [(f"adam.m/{n}", a) for n, a in st.m.items()]
        items += [(f"adam.v/{n}", a) for n, a in st.v.items()]
        items.append(("adam/t", np.array(float(st.t))))
    items += [(f"metric/{k}", np.array(float(v))) for k, v in sorted(ckpt.metrics.items())]
    return items


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian binary: header, then (name, rank, dims, float64 data) per tensor."""
    items = _flatten_checkpoint(ckpt)
    fp = ckpt.fingerprint.encode("ascii")
    out = [MAGIC, struct.pack("<II", ckpt.version, len(fp)), fp, struct.pack("<I", len(items))]
    for name, arr in items:
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if read(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, fp_len = struct.unpack("<II", read(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        fingerprint = read(fp_len).decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: corrupt fingerprint") from exc
    (count,) = struct.unpack("<I", read(4))
    tensors, m, v, metrics, t = {}, {}, {}, {}, None
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        kind, _, key = name.partition("/")
        if kind == "param":
            tensors[key] = arr
        elif kind == "adam.m":
            m[key] = arr
        elif kind == "adam.v":
            v[key] = arr
        elif name == "adam/t":
            t = int(arr)
        elif kind == "metric":
            metrics[key] = float(arr)
        else:
            raise FormatError(f"{path}: unknown entry {name!r}")
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after {count} tensors")
    adam = AdamState(m, v, t) if t is not None else None
    return Checkpoint(fingerprint, tensors, adam, metrics, version)


# ---------------------------------------------------------------------------
# graph batches
# ---------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """One subgraph: node inputs plus split membership. Carries no labels."""

    ids: list[str]
    batch: NodeBatch
    measured: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _zero_grads(params):
    for p in params.values():
        p.grad = None


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list[tuple[int, str, str, float]]


def run_pretraining(
    graphs: Sequence[GraphBatch],
    schema: FeatureSchema,
    model_config: ModelConfig,
    config: TrainConfig,
    seed: int,
) -> PretrainResult:
    """Masked-imputation pre-training; loss on train nodes, selection on val nodes.

    Labels are not an input: the graphs carry features and split membership only.
    """
    if config.mask is None:
        raise ConfigError("pre-training needs a mask spec")
    params = build_variant(model_config, seed, heads=("imputation",))
    layout = ImputationLayout.from_config(model_config)
    fp = config_fingerprint(model_config, schema)
    state = AdamState.zeros_like(params)
    history: list[tuple[int, str, str, float]] = []
    best_val, best = np.inf, None
    for epoch in range(config.epochs):
        _zero_grads(params)
        train_tot, val_tot, n_val = 0.0, 0.0, 0
        groups: dict[str, float] = {}
        for g in graphs:
            mb = apply_mask_tokens(g.batch, g.ids, g.measured, schema, config.mask, epoch, seed)
            pred = decoder_forward(encoder_forward(mb.inputs, params, model_config), "imputation", params)
            loss, parts = imputation_loss(pred, mb, layout, schema, nodes=g.train)
            ad.backward(ad.multiply(loss, 1.0 / len(graphs)))
            train_tot += parts["total"] / len(graphs)
            for k, val in parts.items():
                groups[k] = groups.get(k, 0.0) + val / len(graphs)
            if g.val.any():
                try:
                    _, vparts = imputation_loss(Tensor(pred.data), mb, layout, schema, nodes=g.val)
                    val_tot += vparts["total"]
                    n_val += 1
                except Exception:  # empty validation support this epoch
                    pass
        for k, val in sorted(groups.items()):
            history.append((epoch, "train", f"loss_{k}", val))
        score = val_tot / n_val if n_val else train_tot
        if n_val:
            history.append((epoch, "val", "loss_total", score))
        if score < best_val:
            best_val = score
            best = Checkpoint.from_params(params, fp, metrics={"epoch": epoch, "val_loss": score, "train_loss": train_tot})
        adam_step(params, state, config.lr(epoch))
        if epoch % max(1, config.epochs // 10) == 0:
            log.info("pretrain epoch %d loss %.5f val %.5f", epoch, train_tot, score)
    final = Checkpoint.from_params(params, fp, adam=state, metrics={"epoch": config.epochs, "train_loss": train_tot})
    return PretrainResult(final, best, history)


# ---------------------------------------------------------------------------
# fine-tuning / from scratch
# ---------------------------------------------------------------------------


def init_finetune(pretrained: Checkpoint, model_config: ModelConfig, seed: int, schema: FeatureSchema | None = None) -> dict[str, Tensor]:
    """Encoder tensors copied from the checkpoint, task head freshly initialised."""
    expected = config_fingerprint(model_config, schema)
    if pretrained.fingerprint != expected:
        raise IncompatibleCheckpoint("checkpoint was produced for a different model/schema configuration")
    fresh = build_variant(model_config, seed, heads=())
    for name, t in fresh.items():
        src = pretrained.tensors.get(name)
        if src is None or src.shape != t.shape:
            raise IncompatibleCheckpoint(f"checkpoint lacks a compatible tensor for {name}")
    params = {n: Tensor(pretrained.tensors[n].copy(), requires_grad=True) for n in fresh}
    params.update(init_head(model_config, "task", np.random.default_rng([seed, 7919])))
    return params


def scratch_params(model_config: ModelConfig, seed: int) -> dict[str, Tensor]:
    params = build_variant(model_config, seed, heads=())
    params.update(init_head(model_config, "task", np.random.default_rng([seed, 7919])))
    return params


@dataclass
class TaskResult:
    best: Checkpoint
    metrics: dict[str, float]
    history: list[tuple[int, str, str, float]]
    labeled_count: int


def _label_array(g: GraphBatch, labels: Mapping[str, int]) -> np.ndarray:
    return np.array([labels.get(i, -1) for i in g.ids], dtype=np.int64)


def predict_probs(graphs: Sequence[GraphBatch], params, model_config: ModelConfig) -> list[np.ndarray]:
    return [_softmax(decoder_forward(encoder_forward(g.batch, params, model_config), "task", params).data) for g in graphs]


def split_metrics(graphs, probs, labels, split: str) -> dict[str, float]:
    p, y = [], []
    for g, pr in zip(graphs, probs):
        yy = _label_array(g, labels)
        sel = g.split(split) & (yy >= 0)
        p.append(pr[sel])
        y.append(yy[sel])
    p, y = np.concatenate(p), np.concatenate(y)
    out = {"acc": accuracy(p.argmax(axis=1), y) if len(y) else float("nan")}
    try:
        out["auc"] = task_auc(p, y)
    except Exception:
        out["auc"] = float("nan")
    return out


def run_task_training(
    graphs: Sequence[GraphBatch],
    labels: Mapping[str, int],
    labeled_ids: Sequence[str],
    params: dict[str, Tensor],
    model_config: ModelConfig,
    config: TrainConfig,
    fingerprint: str = "",
) -> TaskResult:
    """Full-batch training on labelled train nodes; keeps the best-validation-AUC epoch.

    Every node takes part in the forward pass; only ``labeled_ids`` (which
    must be train nodes) contribute to the cross-entropy.
    """
    labeled = set(labeled_ids)
    masks, ys = [], []
    for g in graphs:
        y = _label_array(g, labels)
        lab = g.train & np.array([i in labeled for i in g.ids]) & (y >= 0)
        masks.append(lab)
        ys.append(y)
    total = int(sum(m.sum() for m in masks))
    if total == 0:
        raise ConfigError("no labelled training nodes")
    present = set(np.concatenate([y[m] for y, m in zip(ys, masks)]).tolist())
    missing = set(range(model_config.num_classes)) - present
    if missing:
        warnings.warn(f"no labelled training nodes for classes {sorted(missing)}")

    state = AdamState.zeros_like(params)
    history: list[tuple[int, str, str, float]] = []
    best_score, best, best_metrics = -np.inf, None, {}
    for epoch in range(config.epochs):
        _zero_grads(params)
        probs, train_loss = [], 0.0
        for g, lab, y in zip(graphs, masks, ys):
            logits = decoder_forward(encoder_forward(g.batch, params, model_config), "task", params)
            probs.append(_softmax(logits.data))
            if not lab.any():
                continue
            ce = ad.loss_primitive("cross_entropy", logits, np.where(lab, y, 0), lab)
            weighted = ad.multiply(ce, lab.sum() / total)
            train_loss += weighted.item()
            ad.backward(weighted)
        val = split_metrics(graphs, probs, labels, "val")
        score = val["auc"] if np.isfinite(val["auc"]) else val["acc"]
        history.append((epoch, "train", "loss", train_loss))
        history.append((epoch, "val", "auc", val["auc"]))
        history.append((epoch, "val", "acc", val["acc"]))
        if score > best_score:
            best_score = score
            test = split_metrics(graphs, probs, labels, "test")
            best_metrics = {
                "best_epoch": float(epoch),
                "val_auc": val["auc"],
                "val_acc": val["acc"],
                "test_auc": test["auc"],
                "test_acc": test["acc"],
                "labeled": float(total),
            }
            best = Checkpoint.from_params(params, fingerprint, metrics=best_metrics)
        adam_step(params, state, config.lr(epoch))
    return TaskResult(best, best_metrics, history, total)


# ---------------------------------------------------------------------------
# imputation evaluation
# ---------------------------------------------------------------------------


def evaluate_imputation(
    graphs: Sequence[GraphBatch],
    params,
    schema: FeatureSchema,
    model_config: ModelConfig,
    mask: MaskSpec,
    seed: int,
    split: str = "test",
    epoch: int = 10**6,
) -> dict[str, float]:
    """Masked-imputation quality on one split, with a train-mean baseline for continuous targets.

    RMSE is in normalised units. Masks are drawn with a fixed ``epoch`` tag
    that training never reaches.
    """
    layout = ImputationLayout.from_config(model_config)
    meas, treat = schema.measurement_idx, schema.treatment_idx
    margins = np.array([schema.discrete_features[i].margin for i in schema.input_discrete])

    # train-split means
    cont_sum = np.zeros(model_config.n_continuous)
    cont_n = 0
    ts_sum = np.zeros(model_config.n_ts)
    ts_n = np.zeros(model_config.n_ts)
    for g in graphs:
        cont_sum += g.batch.continuous[g.train].sum(axis=0)
        cont_n += int(g.train.sum())
        m = g.measured[g.train]
        ts_sum += np.where(m, g.batch.ts_values[g.train], 0.0).sum(axis=(0, 2))
        ts_n += m.sum(axis=(0, 2))
    cont_mean = cont_sum / max(cont_n, 1)
    ts_mean = ts_sum / np.maximum(ts_n, 1)

    preds, base, tgts, elig = [], [], [], []
    d_pred, d_true, d_elig = [], [], []
    t_pred, t_true, t_elig = [], [], []
    for g in graphs:
        nodes = g.split(split)
        if not nodes.any():
            continue
        mb = apply_mask_tokens(g.batch, g.ids, g.measured, schema, mask, epoch, seed)
        out = decoder_forward(encoder_forward(mb.inputs, params, model_config), "imputation", params).data[nodes]
        if layout.continuous_cols:
            preds.append(out[:, list(layout.continuous_cols)])
            base.append(np.broadcast_to(cont_mean, preds[-1].shape))
            tgts.append(mb.cont_target[nodes])
            elig.append(mb.cont_mask[nodes])
        if meas:
            cols = layout.ts_columns(meas)
            preds.append(out[:, cols].reshape(nodes.sum(), -1))
            base.append(np.broadcast_to(np.repeat(ts_mean[meas], model_config.series_length), preds[-1].shape))
            tgts.append(mb.ts_target[nodes][:, meas, :].reshape(nodes.sum(), -1))
            elig.append(mb.ts_eligible[nodes][:, meas, :].reshape(nodes.sum(), -1))
        if layout.discrete_vocab:
            d_pred.append(
                np.stack([out[:, o : o + v].argmax(axis=1) for o, v in zip(layout.discrete_offsets, layout.discrete_vocab)], axis=1)
            )
            d_true.append(mb.disc_target[nodes])
            d_elig.append(mb.disc_mask[nodes])
        if treat:
            cols = layout.ts_columns(treat)
            logits = out[:, cols].reshape(nodes.sum(), -1)
            t_pred.append(1.0 / (1.0 + np.exp(-logits)))
            t_true.append(mb.ts_target[nodes][:, treat, :].reshape(nodes.sum(), -1))
            t_elig.append(mb.ts_eligible[nodes][:, treat, :].reshape(nodes.sum(), -1))

    res: dict[str, float] = {}
    if preds:
        p, b, t, e = (np.concatenate([a.reshape(-1) for a in x]) for x in (preds, base, tgts, elig))
        if e.any():
            res["rmse"] = rmse_masked(p, t, e)
            res["rmse_mean_baseline"] = rmse_masked(b, t, e)
    if d_pred:
        e = np.concatenate(d_elig)
        if e.any():
            res["margin_acc"] = margin_accuracy(np.concatenate(d_pred), np.concatenate(d_true), margins, e)
    if t_pred:
        e = np.concatenate([a.reshape(-1) for a in t_elig])
        if e.any():
            res["f1"] = f1_binary(np.concatenate([a.reshape(-1) for a in t_pred])[e], np.concatenate([a.reshape(-1) for a in t_true])[e])
    return res
