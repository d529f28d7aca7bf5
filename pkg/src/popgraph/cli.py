"""``popgraph`` command line: generate, pretrain, train, finetune, evaluate, sweep.

Every run directory receives ``run_config.json`` holding the fully resolved
options; ``--config <that file>`` replays the run. Outputs contain no
timestamps, so a replay writes byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cohort import Cohort, FoldScheme, load_cohort, make_folds, subsample_labels, synthesize_cohort, write_cohort
from .errors import ConfigError, DivergenceError, IncompatibleCheckpoint, ParseError, SchemaError, ValidationError
from .experiments import DEFAULT_LABEL_RATIOS, Protocol, build_fold_data, desk_protocol, full_protocol, label_sweep, prepare_cohort
from .masking import MaskSpec
from .metrics import aggregate_folds, reports_table, reports_to_csv
from .model import IMPUTATION_HEAD, TASK_HEAD
from .train import (
    TrainConfig,
    config_fingerprint,
    evaluate_imputation,
    init_finetune,
    load_checkpoint,
    predict_probs,
    run_pretraining,
    run_task_training,
    save_checkpoint,
    scratch_params,
    split_metrics,
)

log = logging.getLogger("popgraph")

COMMANDS = ("generate", "pretrain", "train", "finetune", "evaluate", "sweep")
EXIT_CODES = {ConfigError: 3, OSError: 4, DivergenceError: 5, IncompatibleCheckpoint: 6}
MIN_SYNTHETIC_N = 20


@dataclass
class RunConfig:
    """Resolved options of one invocation, serialised verbatim next to its outputs."""

    command: str = "pretrain"
    preset: str = "static"
    schema: str | None = None
    records: str | None = None
    n: int = 300
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    folds: str | None = None  # "kfold:10" | "holdout:6[:a/b/c]"; preset default when unset
    max_folds: int | None = None
    label_ratios: list[float] = field(default_factory=lambda: [1.0])
    mask: str | None = None  # static | fm | bm; preset default when unset
    mask_ratio: float = 0.30
    block_len: int = 6
    protocol: str = "desk"  # desk | full
    epochs: int | None = None
    epochs_scale: float = 1.0
    lr: float | None = None
    lr_end: float | None = None
    variant: str = "full"
    model: dict = field(default_factory=dict)
    k: int = 5
    group_size: int = 500
    checkpoint: str | None = None
    out: str = "runs/out"
    parallel_folds: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**d)

    def dump(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    # ---- resolution --------------------------------------------------------

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.preset not in ("static", "timeseries"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.schema is None and self.n < MIN_SYNTHETIC_N:
            raise ConfigError(f"--n must be at least {MIN_SYNTHETIC_N}, got {self.n}")
        if (self.schema is None) != (self.records is None):
            raise ConfigError("--schema and --records must be given together")
        if not all(0 < r <= 1 for r in self.label_ratios):
            raise ConfigError("label ratios must lie in (0, 1]")
        if self.epochs_scale <= 0:
            raise ConfigError("--epochs-scale must be positive")
        if self.protocol not in ("desk", "full"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.parallel_folds < 1:
            raise ConfigError("--parallel-folds must be >= 1")

    def mask_spec(self) -> MaskSpec:
        name = self.mask or ("static" if self.preset == "static" else "fm")
        return MaskSpec.from_cli(name, self.mask_ratio, self.block_len)

    def fold_scheme(self) -> FoldScheme:
        return FoldScheme.parse(self.folds or ("kfold:10" if self.preset == "static" else "holdout:6"))

    def load_cohort(self) -> Cohort:
        if self.schema is not None:
            return load_cohort(self.schema, self.records)
        return synthesize_cohort(self.seed, self.n, self.preset)

    def resolve_protocol(self, cohort: Cohort) -> Protocol:
        build = desk_protocol if self.protocol == "desk" else full_protocol
        proto = build(cohort, self.preset, self.mask_spec(), **self.model)
        model = proto.model.variant(self.variant)

        def adjust(tc: TrainConfig | None, mode: str) -> TrainConfig | None:
            if tc is None:
                return None
            tc = tc.scaled(self.epochs_scale)
            if mode == self.command_mode():
                if self.epochs is not None:
                    tc = replace(tc, epochs=self.epochs)
                if self.lr is not None:
                    end = self.lr_end if self.lr_end is not None else self.lr
                    tc = replace(tc, lr_start=self.lr, lr_end=end, schedule="poly" if end != self.lr else "constant")
            return tc

        return replace(
            proto,
            model=model,
            pretrain=adjust(proto.pretrain, "pretrain"),
            scratch=adjust(proto.scratch, "scratch"),
            finetune=adjust(proto.finetune, "finetune"),
            finetune_low_label=adjust(proto.finetune_low_label, "finetune"),
            k=self.k,
            group_size=self.group_size,
        )

    def command_mode(self) -> str:
        return {"train": "scratch"}.get(self.command, self.command)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metric_log(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in history:
            w.writerow([epoch, split, metric, _fmt(value)])


def write_rows(path: Path, rows: list[dict]) -> None:
    keys = sorted({k for r in rows for k in r})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def write_summary(out: Path, rows: list[dict], group_keys: tuple[str, ...]) -> str:
    """Per-fold rows to summary.csv plus a mean ± std table over folds."""
    write_rows(out / "summary.csv", rows)
    reports = []
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in group_keys), []).append(r)
    for key, members in groups.items():
        tag = " ".join(f"{k}={v}" for k, v in zip(group_keys, key))
        for metric in sorted(members[0]):
            if metric in group_keys or metric == "fold":
                continue
            vals = [m[metric] for m in members if np.isfinite(m[metric])]
            if vals:
                reports.append(aggregate_folds(vals, f"{tag} {metric}".strip()))
    (out / "summary_folds.csv").write_text(reports_to_csv(reports))
    table = reports_table(reports, percent=False) if reports else "(no metrics)"
    (out / "summary.txt").write_text(table + "\n")
    return table


# ---------------------------------------------------------------------------
# per-fold work (module level so process pools can pickle it)
# ---------------------------------------------------------------------------


def _fold_context(cfg: RunConfig, fold_idx: int):
    cohort = prepare_cohort(cfg.load_cohort())
    plan = make_folds(cohort.ids, cfg.fold_scheme(), cfg.seed)
    proto = cfg.resolve_protocol(cohort)
    fd = build_fold_data(cohort, plan.folds[fold_idx], proto.k, proto.group_size, cfg.seed)
    return cohort, proto, fd


def _pretrain_fold(cfg: RunConfig, fold_idx: int) -> list[dict]:
    cohort, proto, fd = _fold_context(cfg, fold_idx)
    fold_dir = Path(cfg.out) / f"fold{fold_idx}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    res = run_pretraining(fd.graphs, cohort.schema, proto.model, proto.pretrain, cfg.seed)
    save_checkpoint(res.best, fold_dir / "pretrain.ckpt")
    save_checkpoint(res.final, fold_dir / "pretrain_final.ckpt")
    write_metric_log(fold_dir / "pretrain_metrics.csv", res.history)
    ev = evaluate_imputation(fd.graphs, res.best.params(), cohort.schema, proto.model, proto.pretrain.mask, cfg.seed)
    first = next(v for e, s, m, v in res.history if s == "train" and m == "loss_total")
    return [{"fold": fold_idx, "loss_epoch0": first, "loss_final": res.final.metrics["train_loss"], **ev}]


def _pretrained_for_fold(cfg: RunConfig, fold_idx: int):
    if cfg.checkpoint is None:
        raise ConfigError("finetune needs --checkpoint (a pretrain run directory or checkpoint file)")
    path = Path(cfg.checkpoint)
    if path.is_dir():
        path = path / f"fold{fold_idx}" / "pretrain.ckpt"
    if not path.exists():
        raise IncompatibleCheckpoint(f"no pre-training checkpoint at {path}")
    return load_checkpoint(path)


def _task_fold(cfg: RunConfig, fold_idx: int) -> list[dict]:
    cohort, proto, fd = _fold_context(cfg, fold_idx)
    mode = cfg.command_mode()
    fold_dir = Path(cfg.out) / f"fold{fold_idx}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    fp = config_fingerprint(proto.model, cohort.schema)
    pretrained = _pretrained_for_fold(cfg, fold_idx) if mode == "finetune" else None
    rows = []
    for ratio in cfg.label_ratios:
        labeled = subsample_labels(fd.fold.train_ids, fd.labels, ratio, cfg.seed)
        if pretrained is not None:
            params = init_finetune(pretrained, proto.model, cfg.seed, cohort.schema)
        else:
            params = scratch_params(proto.model, cfg.seed)
        res = run_task_training(fd.graphs, fd.labels, labeled, params, proto.model, proto.task_config(mode, ratio), fp)
        tag = f"{mode}_r{ratio:g}"
        save_checkpoint(res.best, fold_dir / f"{tag}.ckpt")
        write_metric_log(fold_dir / f"{tag}_metrics.csv", res.history)
        rows.append({"fold": fold_idx, "ratio": ratio, **res.metrics})
    return rows


def _evaluate_fold(cfg: RunConfig, fold_idx: int) -> list[dict]:
    cohort, proto, fd = _fold_context(cfg, fold_idx)
    if cfg.checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint (a run directory or checkpoint file)")
    root = Path(cfg.checkpoint)
    paths = sorted((root / f"fold{fold_idx}").glob("*.ckpt")) if root.is_dir() else [root]
    if not paths:
        raise IncompatibleCheckpoint(f"no checkpoints for fold {fold_idx} under {root}")
    expected = config_fingerprint(proto.model, cohort.schema)
    rows = []
    for path in paths:
        ck = load_checkpoint(path)
        if ck.fingerprint != expected:
            raise IncompatibleCheckpoint(f"{path} was produced for a different model/schema configuration")
        params = ck.params()
        row = {"fold": fold_idx, "checkpoint": path.name}
        if any(n.startswith(IMPUTATION_HEAD) for n in params):
            row.update(evaluate_imputation(fd.graphs, params, cohort.schema, proto.model, proto.pretrain.mask, cfg.seed))
        if any(n.startswith(TASK_HEAD) for n in params):
            probs = predict_probs(fd.graphs, params, proto.model)
            for split in ("val", "test"):
                for k, v in split_metrics(fd.graphs, probs, fd.labels, split).items():
                    row[f"{split}_{k}"] = v
        rows.append(row)
    return rows


def _run_folds(cfg: RunConfig, worker) -> list[dict]:
    cohort = cfg.load_cohort()
    n_folds = len(make_folds(cohort.ids, cfg.fold_scheme(), cfg.seed).folds)
    if cfg.max_folds is not None:
        n_folds = min(n_folds, cfg.max_folds)
    if cfg.parallel_folds > 1 and n_folds > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallel_folds) as pool:
            results = list(pool.map(worker, [cfg] * n_folds, range(n_folds)))
    else:
        results = [worker(cfg, i) for i in range(n_folds)]
    return [row for rows in results for row in rows]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> str:
    cohort = synthesize_cohort(cfg.seed, cfg.n, cfg.preset)
    out = Path(cfg.out)
    write_cohort(cohort, out / "schema.json", out / "records.jsonl")
    return f"wrote {len(cohort.records)} records to {out}"


def cmd_pretrain(cfg: RunConfig) -> str:
    return write_summary(Path(cfg.out), _run_folds(cfg, _pretrain_fold), ())


def cmd_task(cfg: RunConfig) -> str:
    return write_summary(Path(cfg.out), _run_folds(cfg, _task_fold), ("ratio",))


def cmd_evaluate(cfg: RunConfig) -> str:
    rows = _run_folds(cfg, _evaluate_fold)
    write_rows(Path(cfg.out) / "evaluation.csv", rows)
    return write_summary(Path(cfg.out), rows, ("checkpoint",))


def cmd_sweep(cfg: RunConfig) -> str:
    cohort = cfg.load_cohort()
    proto = cfg.resolve_protocol(cohort)
    plan = make_folds(cohort.ids, cfg.fold_scheme(), cfg.seed)
    if cfg.max_folds is not None:
        plan = replace(plan, folds=plan.folds[: cfg.max_folds])
    masks = None
    if cohort.schema.timeseries_features and cfg.mask is None:
        masks = {"BM": MaskSpec.from_cli("bm", cfg.mask_ratio, cfg.block_len), "FM": MaskSpec.from_cli("fm", cfg.mask_ratio, cfg.block_len)}
    result = label_sweep(cohort, plan, proto, cfg.label_ratios, cfg.seeds, masks)
    out = Path(cfg.out)
    write_rows(out / "sweep_rows.csv", result.rows)
    table = result.table_csv()
    (out / "table.csv").write_text(table)
    return table


DISPATCH = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_task,
    "finetune": cmd_task,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _model_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        # every flag defaults to None so a --config file can fill the gaps
        p.add_argument("--config", help="replay a run_config.json; explicit flags still override it")
        p.add_argument("--preset", choices=["static", "timeseries"])
        p.add_argument("--schema", help="schema JSON of a custom cohort")
        p.add_argument("--records", help="JSON Lines records of a custom cohort")
        p.add_argument("--n", type=int, help="synthetic cohort size")
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", type=int, nargs="+", help="seeds for sweep")
        p.add_argument("--folds", help="kfold:K or holdout:R[:train/val/test]")
        p.add_argument("--max-folds", type=int, help="run only the first folds of the scheme")
        p.add_argument("--label-ratio", type=float, help="single label ratio")
        p.add_argument("--label-ratios", type=float, nargs="+")
        p.add_argument("--mask", choices=["static", "fm", "bm"])
        p.add_argument("--mask-ratio", type=float)
        p.add_argument("--block-len", type=int)
        p.add_argument("--protocol", choices=["desk", "full"], help="desk: short CPU schedules; full: full-length schedules")
        p.add_argument("--epochs", type=int)
        p.add_argument("--epochs-scale", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--lr-end", type=float)
        p.add_argument("--variant", choices=["full", "linear", "no-ts-transformer"])
        p.add_argument("--model", type=_model_override, action="append", metavar="KEY=VALUE", help="ModelConfig override")
        p.add_argument("-k", type=int, help="neighbours per node")
        p.add_argument("--group-size", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--out")
        p.add_argument("--parallel-folds", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_args(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    base["command"] = args.command
    direct = (
        "preset schema records n seed seeds folds max_folds mask mask_ratio block_len protocol epochs "
        "epochs_scale lr lr_end variant k group_size checkpoint out parallel_folds"
    ).split()
    for key in direct:
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    if args.label_ratios is not None:
        base["label_ratios"] = args.label_ratios
    if args.label_ratio is not None:
        base["label_ratios"] = [args.label_ratio]
    if args.command == "sweep" and "label_ratios" not in base:
        base["label_ratios"] = list(DEFAULT_LABEL_RATIOS)
    if args.model:
        base["model"] = {**base.get("model", {}), **dict(args.model)}
    cfg = RunConfig.from_dict(base)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_args(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "run_config.json")
        print(DISPATCH[cfg.command](cfg))
        return 0
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        print(f"popgraph: error: {exc}", file=sys.stderr)
        return exit_code(exc)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ValidationError, ParseError, SchemaError)):
        return EXIT_CODES[ConfigError]
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return 1

if __name__ == "__main__":
    sys.exit(main())
