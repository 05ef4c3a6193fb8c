"""Command-line surface: dataset generation, training, evaluation, the
gradient-check suite, and the ablation grids.

Exit codes: 0 success, 1 runtime failure (with the failing component named on
stderr), 2 usage errors (unknown flags or subcommands).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hybridvmr",
        description="Hybrid weakly/fully-supervised video moment retrieval "
                    "on synthetic two-domain data.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic EVDS splits")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--preset", choices=("default", "benchmark"),
                   default="default",
                   help="benchmark: the smaller corpus the ablation grids use")
    g.add_argument("--n-train", type=int, default=None)
    g.add_argument("--n-val", type=int, default=None)
    g.add_argument("--vocab-overlap", type=float, default=None)
    g.add_argument("--noise-sigma", type=float, default=None)
    g.add_argument("--rotation-strength", type=float, default=None)
    g.add_argument("--bias-scale", type=float, default=None)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="run the hybrid training loop")
    t.add_argument("--data", required=True, help="directory with *.evds splits")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--preset", choices=("default", "benchmark"),
                   default="default")
    t.add_argument("--resume", action="store_true",
                   help="continue from checkpoint_last.npz in --out")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a weak-branch artifact on a split")
    e.add_argument("--checkpoint", required=True,
                   help="weak_model.npz exported by training")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="target_val")
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--predictions", default=None,
                   help="optional predictions CSV path")
    e.set_defaults(func=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=5)
    c.set_defaults(func=_cmd_gradcheck)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True, choices=("components", "sharing"))
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="grid output directory")
    a.add_argument("--config", default=None,
                   help="base config file (default: benchmark preset)")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=_cmd_ablate)
    return p


def _cmd_gen_data(args) -> int:
    from .synthdata import DataConfig, benchmark_data_config, generate

    cfg = benchmark_data_config() if args.preset == "benchmark" else DataConfig()
    overrides = {}
    for field_name, arg_name in (("n_train", "n_train"), ("n_val", "n_val"),
                                 ("vocab_overlap", "vocab_overlap"),
                                 ("noise_sigma", "noise_sigma"),
                                 ("rotation_strength", "rotation_strength"),
                                 ("bias_scale", "bias_scale")):
        val = getattr(args, arg_name)
        if val is not None:
            overrides[field_name] = val
    cfg = replace(cfg, **overrides)
    paths = generate(cfg, args.seed, args.out)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, benchmark_train_config, load_config, run

    if args.config is not None:
        cfg = load_config(args.config)
    elif args.preset == "benchmark":
        cfg = benchmark_train_config()
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    result = run(cfg, args.data, args.out, resume=args.resume)
    print(f"finished: best target-val mIoU {result.best_miou:.4f} at epoch "
          f"{result.best_epoch}")
    print(f"metrics: {result.csv_path}")
    print(f"weak artifact: {result.weak_artifact}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import (evaluate, ground_truth_seconds, infer_split,
                             write_metrics_csv, write_predictions_csv)
    from .synthdata import load_split
    from .trainer import load_weak_artifact

    pipeline, mcfg = load_weak_artifact(args.checkpoint)
    samples = load_split(Path(args.data) / f"{args.split}.evds")
    preds = infer_split(pipeline, samples, mcfg.window_sizes, mcfg.stride)
    report = evaluate(preds, ground_truth_seconds(samples))
    write_metrics_csv(args.out, report)
    if args.predictions is not None:
        write_predictions_csv(args.predictions, preds)
    recalls = " ".join(f"R@1[IoU>{m}]={report.recall_at_1[m]:.4f}"
                       for m in sorted(report.recall_at_1))
    print(f"{args.split}: {recalls} mIoU={report.miou:.4f} "
          f"({report.sample_count} samples)")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, suite_ok

    results = run_suite(n_seeds=args.seeds)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} "
              f"max_rel_err={r.max_err:.3e}")
    ok = suite_ok(results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


COMPONENT_GRID = (
    ("WR", dict(use_full=False, use_align=False, use_domain=False)),
    ("WR+FA", dict(use_full=True, use_align=False, use_domain=False)),
    ("WR+FA+Align", dict(use_full=True, use_align=True, use_domain=False)),
    ("WR+FA+Domain", dict(use_full=True, use_align=False, use_domain=True)),
    ("WR+FA+Align+Domain", dict(use_full=True, use_align=True, use_domain=True)),
)

SHARING_GRID = (
    ("No Sharing", frozenset()),
    ("Self1+Self2", frozenset({"self1", "self2"})),
    ("Self1+Cross", frozenset({"self1", "cross"})),
    ("Self2+Cross", frozenset({"self2", "cross"})),
    ("Self1+Self2+Cross", frozenset({"self1", "self2", "cross"})),
    ("Cross", frozenset({"cross"})),
)


def run_grid(grid_name: str, base_cfg, data_dir, out_dir, seed: int) -> Path:
    """Train every row of a grid and write a comparison CSV of best-epoch
    target-val metrics. Returns the CSV path."""
    from .trainer import read_metrics_row, run

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if grid_name == "components":
        rows = [(label, replace(base_cfg, seed=seed, **toggles))
                for label, toggles in COMPONENT_GRID]
    else:
        rows = [(label, replace(base_cfg, seed=seed, sharing=sharing))
                for label, sharing in SHARING_GRID]
    lines = ["config,R1_iou03,R1_iou05,R1_iou07,miou"]
    for label, cfg in rows:
        slug = label.lower().replace("+", "_").replace(" ", "_")
        result = run(cfg, data_dir, out / slug)
        best = read_metrics_row(result.csv_path, result.best_epoch)
        lines.append(",".join([label, best["R1_iou03"], best["R1_iou05"],
                               best["R1_iou07"], best["miou"]]))
        print(f"{label}: R@1[IoU>0.5]={float(best['R1_iou05']):.4f} "
              f"mIoU={float(best['miou']):.4f}")
    csv_path = out / f"ablation_{grid_name}.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path


def _cmd_ablate(args) -> int:
    from .trainer import benchmark_train_config, load_config

    base = (load_config(args.config) if args.config is not None
            else benchmark_train_config())
    csv_path = run_grid(args.grid, base, args.data, args.out, args.seed)
    print(f"grid written: {csv_path}")
    return 0


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
