"""Tiny fixtures shared by the model, training and acceptance tests."""

from __future__ import annotations

import numpy as np

from popgraph import autodiff as ad
from popgraph.cohort import interpolate_cohort, normalize_continuous, synthesize_cohort
from popgraph.graph import build_graph
from popgraph.masking import MaskSpec, apply_mask_tokens, imputation_loss
from popgraph.model import ImputationLayout, ModelConfig, NodeBatch, build_variant, decoder_forward, encoder_forward

TINY_DIMS = {
    "static": dict(d_discrete=8, d_continuous=8, attention_heads=2, num_graphormer_layers=2, ffn_multiplier=2),
    "timeseries": dict(
        d_ts_model=8, d_ts_out=16, ts_heads=2, ts_layers=2, attention_heads=2, num_graphormer_layers=2, ffn_multiplier=2
    ),
}
VARIANTS = ("full", "linear", "no-ts-transformer")


def tiny_setup(preset: str, variant: str = "full", n: int = 6, seed: int = 0):
    """A normalised n-node graph from a synthetic cohort plus a small model config."""
    cohort = synthesize_cohort(seed, max(n, 20), preset)
    if preset == "timeseries":
        cohort = interpolate_cohort(cohort)
    ids = cohort.ids[:n]
    cohort, _ = normalize_continuous(cohort, ids)
    graph = build_graph(cohort, ids, k=2)
    arrays = cohort.arrays(ids)
    batch = NodeBatch.from_arrays(arrays, cohort.schema, graph)
    config = ModelConfig.from_schema(cohort.schema, **TINY_DIMS[preset]).variant(variant)
    labels = np.array([cohort.record(i).label for i in ids])
    return cohort, config, batch, arrays["measured"], ids, labels


def pretrain_loss_fn(preset: str, variant: str, seed: int = 0):
    """(params, closure) for the masked-imputation loss on the tiny graph."""
    cohort, config, batch, measured, ids, _ = tiny_setup(preset, variant, seed=seed)
    spec = MaskSpec("static_random") if preset == "static" else MaskSpec("block_masking")
    mb = apply_mask_tokens(batch, ids, measured, cohort.schema, spec, epoch=0, seed=seed)
    layout = ImputationLayout.from_config(config)
    params = build_variant(config, seed, heads=("imputation",))
    _perturb(params, seed)

    def loss():
        pred = decoder_forward(encoder_forward(mb.inputs, params, config), "imputation", params)
        return imputation_loss(pred, mb, layout, cohort.schema)[0]

    return params, loss


def task_loss_fn(preset: str, variant: str, seed: int = 0):
    _, config, batch, _, _, labels = tiny_setup(preset, variant, seed=seed)
    params = build_variant(config, seed, heads=("task",))
    _perturb(params, seed)
    weight = np.array([1, 1, 0, 1, 0, 1])

    def loss():
        logits = decoder_forward(encoder_forward(batch, params, config), "task", params)
        return ad.loss_primitive("cross_entropy", logits, labels, weight)

    return params, loss


def _perturb(params, seed):
    # move biases and layer-norm gains off their symmetric init values
    rng = np.random.default_rng([seed, 1])
    for t in params.values():
        t.data += rng.normal(0.0, 0.1, size=t.data.shape)
