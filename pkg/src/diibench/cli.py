"""Command line: `bench run | generate | heatmap`."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import METHOD_NAMES, RunConfig, run_benchmark
from .heatmap import HeatmapSpec, emit_heatmap, grid_from_site_rows
from .taskgen import resolve_task, sample_pair


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="1D interchange-intervention feature benchmark")
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the benchmark sweep")
    run.add_argument("--config", help="JSON run config; flags below override it")
    run.add_argument("--model-dir")
    run.add_argument("--checkpoint")
    run.add_argument("--tokenizer")
    run.add_argument("--tasks", type=_csv_list)
    run.add_argument("--methods", type=_csv_list, help=",".join(METHOD_NAMES))
    run.add_argument("--train-pairs", type=int)
    run.add_argument("--eval-pairs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--probe-lambdas", type=lambda s: tuple(float(x) for x in _csv_list(s)))
    run.add_argument("--checkpoints", type=_csv_list, help="comma-separated checkpoint files for a sweep")
    run.add_argument("--dtype", choices=("float32", "float64"))
    run.add_argument("--out")
    run.add_argument("--jobs", type=int)
    run.add_argument("--no-heatmaps", action="store_true")

    gen = sub.add_parser("generate", help="print sampled minimal pairs as TSV")
    gen.add_argument("--task", required=True, help="bundled task name or path to a task JSON")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)

    hm = sub.add_parser("heatmap", help="draw one layer × region grid from a site CSV")
    hm.add_argument("--in", dest="inp", required=True)
    hm.add_argument("--task", required=True)
    hm.add_argument("--method", required=True)
    hm.add_argument("--checkpoint")
    hm.add_argument("--vmin", type=float)
    hm.add_argument("--vmax", type=float)
    hm.add_argument("--out", required=True)
    return ap


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else None
    overrides = {
        "model_dir": args.model_dir,
        "checkpoint": args.checkpoint,
        "tokenizer_path": args.tokenizer,
        "tasks": args.tasks,
        "methods": args.methods,
        "n_train_pairs": args.train_pairs,
        "n_eval_pairs": args.eval_pairs,
        "seed": args.seed,
        "probe_lambdas": args.probe_lambdas,
        "checkpoints": args.checkpoints,
        "dtype": args.dtype,
        "out_dir": args.out,
        "jobs": args.jobs,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.no_heatmaps:
        overrides["heatmaps"] = False
    return replace(cfg, **overrides) if cfg is not None else RunConfig(**overrides)


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    result = run_benchmark(cfg)
    for r in result.records:
        ckpt = f" [{r.checkpoint}]" if r.checkpoint else ""
        print(f"{r.task:24s} {r.method:8s}{ckpt} odds={r.overall_odds:8.4f} sel={r.selectivity:8.4f} acc={r.accuracy:.3f}")
    for name, why in result.skipped:
        print(f"skipped {name}: {why}", file=sys.stderr)
    if result.failures:
        print(f"{len(result.failures)} cell(s) failed; see {Path(cfg.out_dir) / 'failures.csv'}", file=sys.stderr)
    return result.exit_code


def cmd_generate(args) -> int:
    if args.n < 1:
        raise SystemExit("--n must be ≥ 1")
    template = resolve_task(args.task)
    rng = np.random.default_rng(args.seed)
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(["base", "source", "base_label", "source_label", "base_type", "source_type"])
    for _ in range(args.n):
        e = sample_pair(template, rng)
        w.writerow([e.base, e.source, e.base_label, e.source_label, *e.types])
    return 0


def cmd_heatmap(args) -> int:
    with open(args.inp, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    grid = grid_from_site_rows(rows, args.task, args.method, args.checkpoint)
    spec = HeatmapSpec.for_grid(grid, title=f"{args.task} / {args.method}")
    if args.vmin is not None or args.vmax is not None:
        spec = replace(
            spec,
            vmin=spec.vmin if args.vmin is None else args.vmin,
            vmax=spec.vmax if args.vmax is None else args.vmax,
        )
    emit_heatmap(spec, args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    return {"run": cmd_run, "generate": cmd_generate, "heatmap": cmd_heatmap}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
