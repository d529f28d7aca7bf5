"""Multi-modal node encoder, Graphormer stack and linear decoder heads.

Parameters live in a flat ``dict[str, Tensor]``. Names starting with
``encoder.`` form the transferable encoder; ``task_head.`` and
``imputation_head.`` are the two decoders.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import FeatureSchema
from .errors import ConfigError, ShapeError
from .graph import D_MAX, EDGE_BINS, PopulationGraph

ENCODER = "encoder."
TASK_HEAD = "task_head."
IMPUTATION_HEAD = "imputation_head."


@dataclass(frozen=True)
class ModelConfig:
    discrete_vocab: tuple[int, ...] = ()
    n_continuous: int = 0
    ts_kinds: tuple[str, ...] = ()
    series_length: int = 1
    num_classes: int = 2
    num_graphormer_layers: int = 4
    attention_heads: int = 4
    d_discrete: int = 32
    d_continuous: int = 32
    d_ts_model: int = 64
    d_ts_out: int = 32
    ts_heads: int = 4
    ts_layers: int = 2
    ffn_multiplier: int = 4
    use_graphormer: bool = True
    use_ts_transformer: bool = True
    d_max: int = D_MAX
    edge_bins: int = EDGE_BINS
    max_degree: int = 32

    def __post_init__(self):
        if self.hidden <= 0:
            raise ConfigError("model needs at least one input block")
        if self.use_graphormer and (self.num_graphormer_layers < 1 or self.hidden % self.attention_heads):
            raise ConfigError(f"attention_heads={self.attention_heads} must divide F={self.hidden}")
        if self.n_ts and self.use_ts_transformer and (self.ts_layers < 1 or self.d_ts_model % self.ts_heads):
            raise ConfigError(f"ts_heads={self.ts_heads} must divide E={self.d_ts_model}")

    @property
    def n_discrete(self) -> int:
        return len(self.discrete_vocab)

    @property
    def n_ts(self) -> int:
        return len(self.ts_kinds)

    @property
    def hidden(self) -> int:
        return (
            (self.d_discrete if self.n_discrete else 0)
            + (self.d_continuous if self.n_continuous else 0)
            + (self.d_ts_out if self.n_ts else 0)
        )

    @classmethod
    def from_schema(cls, schema: FeatureSchema, **overrides) -> "ModelConfig":
        base = dict(
            discrete_vocab=tuple(schema.discrete_features[i].vocab_size for i in schema.input_discrete),
            n_continuous=len(schema.input_continuous),
            ts_kinds=tuple(f.kind for f in schema.timeseries_features),
            series_length=schema.series_length,
            num_classes=schema.num_classes,
            num_graphormer_layers=8 if schema.timeseries_features else 4,
        )
        base.update(overrides)
        return cls(**base)

    def variant(self, name: str) -> "ModelConfig":
        if name == "full":
            return replace(self, use_graphormer=True, use_ts_transformer=True)
        if name == "linear":
            return replace(self, use_graphormer=False)
        if name == "no-ts-transformer":
            return replace(self, use_ts_transformer=False)
        raise ConfigError(f"unknown model variant {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_fingerprint(self) -> str:
        """Hash of everything that shapes encoder tensors (not the task head)."""
        d = self.to_dict()
        d.pop("num_classes")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class ImputationLayout:
    """Column layout of the imputation head output."""

    discrete_offsets: tuple[int, ...]
    discrete_vocab: tuple[int, ...]
    continuous_cols: tuple[int, ...]
    ts_offset: int
    n_ts: int
    series_length: int
    width: int

    @classmethod
    def from_config(cls, config: ModelConfig) -> "ImputationLayout":
        offsets, pos = [], 0
        for v in config.discrete_vocab:
            offsets.append(pos)
            pos += v
        cont = tuple(range(pos, pos + config.n_continuous))
        pos += config.n_continuous
        ts_offset = pos
        pos += config.n_ts * config.series_length
        return cls(tuple(offsets), config.discrete_vocab, cont, ts_offset, config.n_ts, config.series_length, pos)

    def ts_columns(self, features) -> np.ndarray:
        """Columns for (feature, hour) cells, shape (len(features), tau); grid is hour-major."""
        feats = np.asarray(features, dtype=np.int64)
        hours = np.arange(self.series_length)
        return self.ts_offset + hours[None, :] * self.n_ts + feats[:, None]


@dataclass
class NodeBatch:
    """Node inputs for one (sub)graph, rows aligned with ``graph.node_ids``."""

    discrete: np.ndarray  # (N, D) int, mask-token slot allowed
    continuous: np.ndarray  # (N, C)
    ts_values: np.ndarray  # (N, S, tau)
    ts_mask_cols: np.ndarray  # (N, S, tau) 0/1
    in_degree: np.ndarray
    out_degree: np.ndarray
    spd: np.ndarray
    edge_bins: np.ndarray

    @property
    def n(self) -> int:
        return len(self.in_degree)

    @classmethod
    def from_arrays(cls, arrays: dict, schema: FeatureSchema, graph: PopulationGraph) -> "NodeBatch":
        ts = arrays["timeseries"]
        return cls(
            discrete=arrays["discrete"][:, schema.input_discrete],
            continuous=arrays["continuous"][:, schema.input_continuous],
            ts_values=ts,
            ts_mask_cols=np.zeros_like(ts),
            in_degree=graph.in_degree,
            out_degree=graph.out_degree,
            spd=graph.spd,
            edge_bins=graph.edge_bins,
        )

    def permuted(self, perm: np.ndarray) -> "NodeBatch":
        """Node relabelling: row ``i`` of the result is row ``perm[i]`` here."""
        return NodeBatch(
            self.discrete[perm],
            self.continuous[perm],
            self.ts_values[perm],
            self.ts_mask_cols[perm],
            self.in_degree[perm],
            self.out_degree[perm],
            self.spd[np.ix_(perm, perm)],
            self.edge_bins[np.ix_(perm, perm)],
        )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def xavier(self, name, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.params[name] = Tensor(self.rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

    def zeros(self, name, *shape):
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(self, name, *shape):
        self.params[name] = Tensor(np.ones(shape), requires_grad=True)

    def normal(self, name, *shape, std=0.02):
        self.params[name] = Tensor(self.rng.normal(0.0, std, size=shape), requires_grad=True)

    def linear(self, prefix, fan_in, fan_out):
        self.xavier(prefix + ".W", fan_in, fan_out)
        self.zeros(prefix + ".b", fan_out)

    def layer_norm(self, prefix, width):
        self.ones(prefix + ".g", width)
        self.zeros(prefix + ".b", width)

    def transformer_block(self, prefix, width, ffn):
        self.layer_norm(prefix + ".ln1", width)
        for proj in ("q", "k", "v", "o"):
            self.linear(f"{prefix}.{proj}", width, width)
        self.layer_norm(prefix + ".ln2", width)
        self.linear(prefix + ".ffn1", width, ffn * width)
        self.linear(prefix + ".ffn2", ffn * width, width)


def init_encoder(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    init = _Init(rng)
    p = ENCODER
    for k, vocab in enumerate(config.discrete_vocab):
        init.normal(f"{p}discrete.{k}", vocab + 1, config.d_discrete)
    if config.n_continuous:
        init.linear(p + "continuous", config.n_continuous, config.d_continuous)
    if config.n_ts:
        E = config.d_ts_model
        init.linear(p + "ts.input", 2 * config.n_ts, E)
        init.normal(p + "ts.position", config.series_length, E)
        if config.use_ts_transformer:
            for layer in range(config.ts_layers):
                init.transformer_block(f"{p}ts.layer{layer}", E, config.ffn_multiplier)
        init.linear(p + "ts.output", E, config.d_ts_out)
    F = config.hidden
    if config.use_graphormer:
        init.normal(p + "degree_in", config.max_degree + 1, F)
        init.normal(p + "degree_out", config.max_degree + 1, F)
        init.normal(p + "spatial_bias", config.d_max + 2, config.attention_heads)
        init.normal(p + "edge_bias", config.edge_bins + 1, config.attention_heads)
        for layer in range(config.num_graphormer_layers):
            init.transformer_block(f"{p}graphormer{layer}", F, config.ffn_multiplier)
    else:
        init.linear(p + "linear", F, F)
    init.layer_norm(p + "final_ln", F)
    return init.params


def init_head(config: ModelConfig, head: str, rng: np.random.Generator) -> dict[str, Tensor]:
    init = _Init(rng)
    if head == "task":
        init.linear(TASK_HEAD + "out", config.hidden, config.num_classes)
    elif head == "imputation":
        init.linear(IMPUTATION_HEAD + "out", config.hidden, ImputationLayout.from_config(config).width)
    else:
        raise ConfigError(f"unknown head {head!r}")
    return init.params


def build_variant(config: ModelConfig, seed: int, heads=("task", "imputation")) -> dict[str, Tensor]:
    """Freshly initialised parameters: Xavier weights, zero biases, N(0, 0.02) tables."""
    rng = np.random.default_rng(seed)
    params = init_encoder(config, rng)
    for head in heads:
        params.update(init_head(config, head, rng))
    return params


def parameter_count(params) -> int:
    return sum(t.data.size for t in params.values())


def encoder_names(params) -> list[str]:
    return [n for n in params if n.startswith(ENCODER)]


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _lin(x, params, prefix):
    return ad.linear(x, params[prefix + ".W"], params[prefix + ".b"])


def _ln(x, params, prefix):
    return ad.layer_norm_last_axis(x, params[prefix + ".g"], params[prefix + ".b"])


def multi_head_attention(x: Tensor, params, prefix: str, heads: int, bias: Tensor | None = None, trace=None) -> Tensor:
    """Self-attention over the second-to-last axis of ``x`` (..., T, W)."""
    *lead, T, W = x.shape
    dh = W // heads
    r = len(lead)
    to_heads = tuple(range(r)) + (r + 1, r, r + 2)

    def split(t):
        return ad.permute(ad.reshape(t, (*lead, T, heads, dh)), to_heads)

    q = split(_lin(x, params, prefix + ".q"))
    k = split(_lin(x, params, prefix + ".k"))
    v = split(_lin(x, params, prefix + ".v"))
    scores = ad.multiply(ad.matmul(q, ad.transpose_last_two(k)), 1.0 / math.sqrt(dh))
    attn = ad.softmax_rows_with_bias(scores, bias)
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data)
    ctx = ad.reshape(ad.permute(ad.matmul(attn, v), to_heads), (*lead, T, W))
    return _lin(ctx, params, prefix + ".o")


def transformer_block(x: Tensor, params, prefix: str, heads: int, bias=None, trace=None) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then h + FFN(LN(h)) with GELU."""
    h = ad.add(x, multi_head_attention(_ln(x, params, prefix + ".ln1"), params, prefix, heads, bias, trace))
    ff = _lin(ad.gelu(_lin(_ln(h, params, prefix + ".ln2"), params, prefix + ".ffn1")), params, prefix + ".ffn2")
    return ad.add(h, ff)


def embed_discrete(indices: np.ndarray, params, config: ModelConfig) -> Tensor:
    """Sum of per-feature embedding rows, (N, D) -> (N, D')."""
    out = None
    for k in range(config.n_discrete):
        rows = ad.embedding_lookup(params[f"{ENCODER}discrete.{k}"], indices[:, k])
        out = rows if out is None else ad.add(out, rows)
    return out


def embed_continuous(values: np.ndarray, params) -> Tensor:
    return _lin(Tensor(values), params, ENCODER + "continuous")


def embed_timeseries(series: np.ndarray, mask_cols: np.ndarray, params, config: ModelConfig, trace=None) -> Tensor:
    """(N, S, tau) values and mask columns -> (N, S') via per-step tokens and mean pooling."""
    steps = np.concatenate([series, mask_cols], axis=1).transpose(0, 2, 1)  # (N, tau, 2S)
    h = _lin(Tensor(steps), params, ENCODER + "ts.input")
    h = ad.add(h, params[ENCODER + "ts.position"])
    if config.use_ts_transformer:
        for layer in range(config.ts_layers):
            h = transformer_block(h, params, f"{ENCODER}ts.layer{layer}", config.ts_heads, trace=trace)
    pooled = ad.mean_over_axis(h, axis=1)
    return _lin(pooled, params, ENCODER + "ts.output")


def assemble_node_embedding(blocks) -> Tensor:
    blocks = [b for b in blocks if b is not None]
    if not blocks:
        raise ConfigError("node embedding needs at least one feature block")
    return blocks[0] if len(blocks) == 1 else ad.concat_last_axis(blocks)


def structural_bias(batch: NodeBatch, params) -> Tensor:
    """Per-head additive attention bias (H, N, N) from shortest paths and edge bins."""
    spatial = ad.embedding_lookup(params[ENCODER + "spatial_bias"], batch.spd)
    edge = ad.embedding_lookup(params[ENCODER + "edge_bias"], batch.edge_bins)
    return ad.permute(ad.add(spatial, edge), (2, 0, 1))


def graphormer_layer(h: Tensor, bias: Tensor, params, layer: int, config: ModelConfig, trace=None) -> Tensor:
    n = h.shape[0]
    if bias.shape != (config.attention_heads, n, n):
        raise ShapeError(f"structural bias {bias.shape} does not match {n} nodes")
    return transformer_block(h, params, f"{ENCODER}graphormer{layer}", config.attention_heads, bias, trace)


def encoder_forward(batch: NodeBatch, params, config: ModelConfig, trace=None) -> Tensor:
    n = batch.n
    for name, arr in (("spd", batch.spd), ("edge_bins", batch.edge_bins)):
        if arr.shape != (n, n):
            raise ShapeError(f"{name} has shape {arr.shape}, expected {(n, n)}")
    blocks = [
        embed_discrete(batch.discrete, params, config) if config.n_discrete else None,
        embed_continuous(batch.continuous, params) if config.n_continuous else None,
        embed_timeseries(batch.ts_values, batch.ts_mask_cols, params, config, trace) if config.n_ts else None,
    ]
    h = assemble_node_embedding(blocks)
    if config.use_graphormer:
        cap = config.max_degree
        h = ad.add(h, ad.embedding_lookup(params[ENCODER + "degree_in"], np.minimum(batch.in_degree, cap)))
        h = ad.add(h, ad.embedding_lookup(params[ENCODER + "degree_out"], np.minimum(batch.out_degree, cap)))
        bias = structural_bias(batch, params)
        for layer in range(config.num_graphormer_layers):
            h = graphormer_layer(h, bias, params, layer, config, trace)
    else:
        h = _lin(h, params, ENCODER + "linear")
    return _ln(h, params, ENCODER + "final_ln")


def decoder_forward(reps: Tensor, head: str, params) -> Tensor:
    prefix = {"task": TASK_HEAD, "imputation": IMPUTATION_HEAD}[head] + "out"
    if prefix + ".W" not in params:
        raise ConfigError(f"parameters carry no {head} head")
    return _lin(reps, params, prefix)
