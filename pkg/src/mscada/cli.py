"""Command-line interface: dataset generation, training, evaluation,
gradient checks and hyperparameter sweeps."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscada",
                                     description="Multi-source class-asymmetric "
                                                 "domain adaptation for segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic scenario dataset")
    gen.add_argument("--scenario", required=True,
                     choices=["equality2", "equality3", "inclusion2"])
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--samples-per-source", type=int, default=200)
    gen.add_argument("--target-train", type=int, default=100)
    gen.add_argument("--target-test", type=int, default=100)
    gen.add_argument("--size", type=int, default=32)

    train = sub.add_parser("train", help="run adaptation training")
    train.add_argument("--data", required=True)
    train.add_argument("--config", help="JSON training configuration")
    train.add_argument("--out", default="runs/train")
    train.add_argument("--seed", type=int)
    train.add_argument("--iters", type=int)
    train.add_argument("--ablation", choices=["none", "no-mixing", "no-hgcn",
                                              "combined-source", "best-expert",
                                              "summation", "ensemble"])

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the target test set")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", help="directory for report CSV and figures")
    ev.add_argument("--use-teacher", action="store_true")
    ev.add_argument("--no-head", action="store_true",
                    help="fuse branch predictions instead of the integration head")

    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")

    sweep = sub.add_parser("sweep", help="grid-search mixing ratios or loss weights")
    sweep.add_argument("--data", required=True)
    sweep.add_argument("--grid", choices=["mix", "loss"], default="mix")
    sweep.add_argument("--out", default="runs/sweep")
    sweep.add_argument("--config")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--iters", type=int, default=300)
    return parser


def _cmd_gen_data(args) -> int:
    from mscada.synthdata import generate_domain, scenario_presets, write_dataset

    specs = scenario_presets(args.scenario, size=args.size)
    out = Path(args.out)

    def domain_seed(idx: int) -> int:
        return int(np.random.SeedSequence([args.seed, idx]).generate_state(1)[0])

    for idx, spec in enumerate(s for s in specs if s.role != "target"):
        write_dataset(out, spec, generate_domain(spec, args.samples_per_source,
                                                 domain_seed(idx)))
        print(f"wrote {spec.name} ({args.samples_per_source} samples)")
    target = next(s for s in specs if s.role == "target")
    for split, count, idx in (("target_train", args.target_train, 100),
                              ("target_test", args.target_test, 101)):
        split_spec = dataclasses.replace(target, name=f"{args.scenario}.{split}")
        write_dataset(out, split_spec, generate_domain(split_spec, count, domain_seed(idx)))
        print(f"wrote {split_spec.name} ({count} samples)")
    return 0


def _load_config(args) -> "TrainConfig":
    from mscada.trainer import TrainConfig

    if args.config:
        try:
            cfg = TrainConfig.from_file(args.config)
        except json.JSONDecodeError as exc:
            print(f"config parse error: {args.config}:{exc.lineno}:{exc.colno}: {exc.msg}",
                  file=sys.stderr)
            raise SystemExit(1) from None
        except (ValueError, TypeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            raise SystemExit(1) from None
    else:
        cfg = TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        overrides["iterations"] = args.iters
    if getattr(args, "ablation", None):
        overrides["ablation"] = args.ablation
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _cmd_train(args) -> int:
    from mscada.trainer import run_training

    config = _load_config(args)
    report, _ = run_training(config, args.data, args.out)
    print(report.to_text())
    print(f"metrics: {Path(args.out) / 'metrics.csv'}")
    print(f"checkpoint: {Path(args.out) / 'model_final.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    from mscada.figures import save_report_figures
    from mscada.metrics import evaluate
    from mscada.synthdata import CLASS_NAMES, read_dataset
    from mscada.trainer import load_trained_model

    model, teacher, registry, iteration = load_trained_model(args.checkpoint)
    _, samples = read_dataset(args.data, "target_test")
    names = tuple(CLASS_NAMES[c] for c in registry.target_classes)
    subject = teacher.model if args.use_teacher else model
    report = evaluate(subject, samples, registry, use_head=not args.no_head,
                      iteration=iteration, class_names=names)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["class,iou"]
        lines += [f"{names[i]},{v:.10g}" for i, v in enumerate(report.per_class_iou)]
        lines += [f"mIoU,{report.miou:.10g}", f"mF1,{report.mf1:.10g}"]
        (out / "eval_metrics.csv").write_text("\n".join(lines) + "\n")
        for p in save_report_figures(report, out):
            print(f"figure: {p}")
    return 0


def _cmd_gradcheck() -> int:
    from mscada.verification import gradient_suite

    failed = 0
    for name, err, threshold in gradient_suite():
        ok = err < threshold
        failed += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: max rel err {err:.3e} "
              f"(threshold {threshold:.0e})")
    return 1 if failed else 0


def _cmd_sweep(args) -> int:
    from mscada.trainer import run_sweep

    config = _load_config(args)
    results = run_sweep(config, args.data, args.out, grid=args.grid)
    best = max(results, key=lambda r: r["mIoU"])
    print(f"swept {len(results)} cells; best {best}")
    print(f"results: {Path(args.out) / f'sweep_{args.grid}.csv'}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck()
        if args.command == "sweep":
            return _cmd_sweep(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    parser.error(f"unhandled command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
