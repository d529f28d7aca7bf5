"""Pre-train on one synthetic cohort and report imputation quality.

    python3 scripts/pretrain_demo.py --preset timeseries --n 120
"""

from __future__ import annotations

import argparse
from dataclasses import replace

from popgraph.autodiff import Tensor
from popgraph.cohort import FoldScheme, make_folds, synthesize_cohort
from popgraph.experiments import build_fold_data, desk_protocol, prepare_cohort
from popgraph.masking import MaskSpec
from popgraph.train import evaluate_imputation, run_pretraining, save_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="static", choices=["static", "timeseries"])
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mask", choices=["static", "fm", "bm"], help="default: static or fm (timeseries)")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--save", help="write the best checkpoint here")
    args = ap.parse_args()

    cohort = prepare_cohort(synthesize_cohort(args.seed, args.n, args.preset))
    fold = make_folds(cohort.ids, FoldScheme("holdout", repeats=1), args.seed).folds[0]
    fd = build_fold_data(cohort, fold, seed=args.seed)
    proto = desk_protocol(cohort, args.preset, MaskSpec.from_cli(args.mask) if args.mask else None)
    tc = proto.pretrain if args.epochs is None else replace(proto.pretrain, epochs=args.epochs)
    res = run_pretraining(fd.graphs, cohort.schema, proto.model, tc, args.seed)

    losses = [v for e, s, m, v in res.history if s == "train" and m == "loss_total"]
    step = max(1, len(losses) // 10)
    for e in range(0, len(losses), step):
        print(f"epoch {e:4d}  train loss {losses[e]:.4f}")
    print(f"final/epoch-0 loss ratio {losses[-1] / losses[0]:.3f}; best epoch {res.best.metrics['epoch']}")
    params = {k: Tensor(v) for k, v in res.best.tensors.items()}
    for split in ("val", "test"):
        ev = evaluate_imputation(fd.graphs, params, cohort.schema, proto.model, tc.mask, args.seed, split)
        print(split, "  ".join(f"{k} {v:.4f}" for k, v in sorted(ev.items())))
    if args.save:
        save_checkpoint(res.best, args.save)


if __name__ == "__main__":
    main()
