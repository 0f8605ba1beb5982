"""``ftrj`` command line: data generation, the three training phases, evaluation and sweeps."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import (
    EXIT_CONFIG, EXIT_OK, PhaseError, Run, export_plots, open_run, run_pipeline, save_synthetic,
)

logger = logging.getLogger("ftrj")

DEFAULT_LAMBDAS = (0.2, 0.5, 1.0)
DEFAULT_SMOOTHINGS = (0.03, 0.05)


def _threads() -> None:
    n = os.environ.get("FTRJ_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        updates["finsler.lambda"] = args.lam
    if getattr(args, "dataset", None):
        updates["data.source"] = "csv"
        updates["data.path"] = str(args.dataset)
    if getattr(args, "lineage", None):
        updates["lineage.path"] = str(args.lineage)
    if getattr(args, "heldout", None):
        updates["data.heldout"] = [float(t) for t in args.heldout.split(",") if t.strip()]
    return cfg.with_values(updates)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, required=out_required, help="run directory")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--lineage", type=Path, help="lineage JSON")
    p.add_argument("--dataset", type=Path, help="dataset CSV (t,label,x_1..x_n)")
    p.add_argument("--lambda", dest="lam", type=float, help="override finsler.lambda")
    p.add_argument("--heldout", help="comma-separated held-out timepoints")


def _grid(spec: str | None, default):
    if not spec:
        return list(default)
    return [float(v) for v in spec.split(",") if v.strip()]


def sweep(cfg: ExperimentConfig, out: Path, lambdas, smoothings, n_seeds: int = 10) -> dict:
    """Validation sweep, then the winner re-run over ``n_seeds`` seeds on all held-out timepoints."""
    grid = list(itertools.product(lambdas, smoothings))
    if not grid:
        raise ConfigError("empty sweep grid")
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    rows = []
    for k, (lam, sm) in enumerate(grid):
        c = cfg.with_values({"finsler.lambda": float(lam), "classifier.smoothing": float(sm)})
        m = run_pipeline(c, out / f"val_{k}", classifier_cache=cache, validation=True)
        rows.append({"lambda": lam, "smoothing": sm, "val_w1": m["w1_mean"]})
        logger.info("sweep lambda=%g smoothing=%g: validation W1 %.4f", lam, sm, m["w1_mean"])
    best = min(rows, key=lambda r: r["val_w1"])
    best_cfg = cfg.with_values({"finsler.lambda": float(best["lambda"]), "classifier.smoothing": float(best["smoothing"])})
    tests = []
    for s in range(n_seeds):
        m = run_pipeline(best_cfg.replace(seed=cfg["seed"] + s), out / f"test_{s}", classifier_cache=cache)
        tests.append(m)
    w = np.array([m["w1_mean"] for m in tests])
    result = {
        "table": rows,
        "best": {"lambda": best["lambda"], "smoothing": best["smoothing"]},
        "test_w1_mean": float(w.mean()),
        "test_w1_std": float(w.std()),
        "test_w1": w.tolist(),
        "test_consistency": [m["lineage_consistency"] for m in tests],
        "test_allowed_consistency": [m.get("allowed_consistency") for m in tests],
    }
    (out / "sweep.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    (out / "best.config").write_text(best_cfg.dumps(), encoding="utf-8")
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftrj", description="Lineage-aware trajectory inference with a Finsler metric.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write the synthetic dataset and lineage")
    _common(p)

    for name, help_ in (("train-classifier", "fit the cell-type classifier"),
                        ("train-metric", "fit embedding and geodesic networks"),
                        ("train-flow", "fit the flow-matching vector field"),
                        ("pipeline", "run every phase and evaluate")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "pipeline":
            p.add_argument("--dry-run", action="store_true", help="validate config and write manifest only")

    p = sub.add_parser("evaluate", help="score a trained run on held-out timepoints")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--heldout", help="comma-separated held-out timepoints")

    p = sub.add_parser("sweep", help="grid search over lambda and label smoothing")
    _common(p)
    p.add_argument("--lambdas", help="comma-separated lambda grid")
    p.add_argument("--smoothings", help="comma-separated label-smoothing grid")
    p.add_argument("--seeds", type=int, default=10, help="test seeds for the winner")

    p = sub.add_parser("export-plots", help="write trajectory and marginal CSVs for a finished run")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=50, help="number of trajectories")
    return parser


def _phase_run(args, cfg: ExperimentConfig, command: str) -> Run:
    echo = args.out / "config.echo"
    if command != "train-classifier" and echo.exists() and not args.config:
        run = open_run(args.out, command)
        return run
    run = Run(cfg, args.out, command)
    run.start()
    return run


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads()
    try:
        cfg = _config(args) if args.command not in ("evaluate", "export-plots") else None
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "gen-synthetic":
            data, tree = save_synthetic(cfg, args.out)
            print(f"wrote {data} and {tree}")
        elif args.command == "pipeline":
            metrics = run_pipeline(cfg, args.out, dry_run=args.dry_run)
            print(json.dumps(metrics, indent=2, sort_keys=True) if metrics else f"dry run: manifest in {args.out}")
        elif args.command in ("train-classifier", "train-metric", "train-flow"):
            run = _phase_run(args, cfg, args.command)
            {"train-classifier": run.train_classifier, "train-metric": run.train_metric,
             "train-flow": run.train_flow}[args.command]()
            run.finish("ok")
        elif args.command == "evaluate":
            run = open_run(args.out, "evaluate")
            heldout = [float(t) for t in args.heldout.split(",")] if args.heldout else None
            print(json.dumps(run.evaluate(heldout), indent=2, sort_keys=True))
        elif args.command == "sweep":
            result = sweep(cfg, args.out, _grid(args.lambdas, DEFAULT_LAMBDAS),
                           _grid(args.smoothings, DEFAULT_SMOOTHINGS), args.seeds)
            for row in result["table"]:
                print(f"lambda={row['lambda']:<5g} smoothing={row['smoothing']:<5g} val_w1={row['val_w1']:.4f}")
            print(f"best lambda={result['best']['lambda']:g} smoothing={result['best']['smoothing']:g}: "
                  f"W1 {result['test_w1_mean']:.3f} +- {result['test_w1_std']:.3f}")
        elif args.command == "export-plots":
            export_plots(args.out, args.n)
            print(f"wrote {args.out / 'trajectories.csv'} and {args.out / 'marginals.csv'}")
    except PhaseError as exc:
        print(f"error in {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
