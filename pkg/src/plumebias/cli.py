"""Command line driver.

Subcommands: ``gen``, ``train``, ``eval``, ``sweep``, ``grid``, ``report``.
All randomness descends from the top-level ``--seed`` via
:func:`plumebias.rng.derive_seed` with the subcommand name (and split or
scene name) as keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import metrics as M
from .experiment import (
    ALPHA, ConfigKey, ExperimentGrid, json_value, compare, emit_report, load_report, report_csv,
    run_grid,
)
from .impute import ImputationStrategy, impute_dataset_arrays
from .model import ModelKind, TrainConfig, forward_batch, load_checkpoint, save_checkpoint, train
from .resample import DEFAULT_BINS, BinSpec
from .rng import derive_seed
from .sweep import (
    DEFAULT_CELL_DEG, WindowSpec, aggregate_grid, disagreement_map, score_and_flag,
    tile_scene, write_flags_csv, write_grid_csv,
)
from .synthgen import GenConfig, SceneConfig, generate_dataset, generate_scene, load_scene, save_scene
from .tiles import DEFAULT_COVERAGE_SPLIT, load_dataset, save_dataset

log = logging.getLogger("plumebias")

IMPUTATION_CHOICES = ("zero", "median", "sample", "noise")
MODEL_CHOICES = tuple(k.value for k in ModelKind)


def _add_common_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, default=M.DEFAULT_THRESHOLD)
    p.add_argument("--coverage-split", type=float, default=DEFAULT_COVERAGE_SPLIT)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plumebias", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset or deployment scene")
    gsub = g.add_subparsers(dest="what", required=True)
    gd = gsub.add_parser("dataset")
    gd.add_argument("--n", type=int, default=1000)
    gd.add_argument("--bias", type=float, default=1.0)
    gd.add_argument("--plume-rate", type=float, default=0.5)
    gd.add_argument("--channels", type=int, default=3)
    gd.add_argument("--size", type=int, default=32)
    gd.add_argument("--split", choices=("train", "val", "test"), default="train")
    gd.add_argument("--out", type=Path, required=True)
    gs = gsub.add_parser("scene")
    gs.add_argument("--rows", type=int, default=512)
    gs.add_argument("--cols", type=int, default=512)
    gs.add_argument("--width-deg", type=float, default=30.0)
    gs.add_argument("--height-deg", type=float, default=30.0)
    gs.add_argument("--lat-max", type=float, default=60.0)
    gs.add_argument("--lon-min", type=float, default=-10.0)
    gs.add_argument("--plumes", type=int, default=150)
    gs.add_argument("--channels", type=int, default=3)
    gs.add_argument("--name", default="scene")
    gs.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train one model and write a checkpoint")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--model", choices=MODEL_CHOICES, default="vanilla")
    t.add_argument("--imputation", choices=IMPUTATION_CHOICES, default="zero")
    t.add_argument("--noise-scale", type=float, default=1.0)
    t.add_argument("--resample", action="store_true")
    t.add_argument("--bins", type=int, default=DEFAULT_BINS)
    t.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    t.add_argument("--threshold", type=float, default=M.DEFAULT_THRESHOLD)
    t.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="test-set metrics for a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--imputation", choices=IMPUTATION_CHOICES, help="default: the checkpoint's")
    e.add_argument("--noise-scale", type=float)
    e.add_argument("--out", type=Path, help="write metrics JSON here as well")
    _add_common_eval(e)

    s = sub.add_parser("sweep", help="sliding-window deployment sweep over a scene")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, nargs="+", required=True)
    s.add_argument("--against", type=Path, nargs="*", default=[],
                   help="second configuration's checkpoints; enables grid.csv")
    s.add_argument("--window", type=int, default=32)
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--cell-deg", type=float, default=DEFAULT_CELL_DEG)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", type=Path, required=True)
    _add_common_eval(s)

    gr = sub.add_parser("grid", help="run the full configuration grid over seeds")
    gr.add_argument("--train", type=Path, help="training .tds (default: generate)")
    gr.add_argument("--test", type=Path, help="test .tds (default: generate)")
    gr.add_argument("--scene", type=Path, help="deployment scene (default: generate)")
    gr.add_argument("--n-train", type=int, default=4000)
    gr.add_argument("--n-test", type=int, default=1000)
    gr.add_argument("--bias", type=float, default=1.0)
    gr.add_argument("--models", nargs="+", choices=MODEL_CHOICES, default=list(MODEL_CHOICES))
    gr.add_argument("--imputation", nargs="+", choices=IMPUTATION_CHOICES, default=list(IMPUTATION_CHOICES))
    gr.add_argument("--resample", choices=("off", "on", "both"), default="both")
    gr.add_argument("--seeds", type=int, default=5, help="number of seeds")
    gr.add_argument("--epochs", type=int, default=ExperimentGrid.epochs)
    gr.add_argument("--batch-size", type=int, default=ExperimentGrid.batch_size)
    gr.add_argument("--lr", type=float, default=ExperimentGrid.learning_rate)
    gr.add_argument("--bins", type=int, default=DEFAULT_BINS)
    gr.add_argument("--noise-scale", type=float, default=1.0)
    gr.add_argument("--cell-deg", type=float, default=DEFAULT_CELL_DEG)
    gr.add_argument("--jobs", type=int, default=1)
    gr.add_argument("--out", type=Path, required=True)
    _add_common_eval(gr)

    r = sub.add_parser("report", help="print a grid report with significance marks")
    r.add_argument("--in", dest="inp", type=Path, required=True, help="report.json from `grid`")
    r.add_argument("--format", choices=("table", "csv", "json"), default="table")
    r.add_argument("--alpha", type=float, default=ALPHA)
    return ap


def cmd_gen(args) -> int:
    if args.what == "dataset":
        cfg = GenConfig(n_tiles=args.n, bias=args.bias, plume_rate=args.plume_rate,
                        channels=args.channels, size=args.size,
                        seed=derive_seed(args.seed, "gen", args.split),
                        id_prefix=args.split[:2])
        ds = generate_dataset(cfg, args.split)
        save_dataset(ds, args.out)
        log.info("wrote %d tiles to %s (positives %d)", len(ds), args.out, int(ds.labels().sum()))
    else:
        cfg = SceneConfig(rows=args.rows, cols=args.cols, width_deg=args.width_deg,
                          height_deg=args.height_deg, lat_max=args.lat_max, lon_min=args.lon_min,
                          n_plumes=args.plumes, gen=GenConfig(channels=args.channels),
                          seed=derive_seed(args.seed, "gen", "scene"), scene_id=args.name)
        save_scene(generate_scene(cfg), args.out)
        log.info("wrote %dx%d scene to %s", args.rows, args.cols, args.out)
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        seed=derive_seed(args.seed, "train"),
        imputation=ImputationStrategy.parse(args.imputation, args.noise_scale),
        resample=args.resample, bins=BinSpec(args.bins), threshold=args.threshold,
    )
    params = train(ds, ModelKind(args.model), cfg)
    save_checkpoint(params, args.out, cfg, {"data": str(args.data)})
    log.info("wrote %s checkpoint (%d parameters) to %s", args.model, params.size, args.out)
    return 0


def _strategy(args, cfg: TrainConfig | None) -> ImputationStrategy:
    if getattr(args, "imputation", None):
        scale = args.noise_scale if args.noise_scale is not None else 1.0
        return ImputationStrategy.parse(args.imputation, scale)
    if cfg is not None:
        return cfg.imputation
    raise SystemExit("checkpoint has no config; pass --imputation")


def cmd_eval(args) -> int:
    params, cfg, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    strategy = _strategy(args, cfg)
    x, _ = impute_dataset_arrays(ds, strategy, derive_seed(args.seed, "eval"))
    scores = forward_batch(params, x)
    y, cov = ds.labels(), ds.coverages()
    c = M.confusion(scores, y, args.threshold)
    dfpr, dtpr = M.delta_rates(scores, y, cov, args.threshold, args.coverage_split)
    result = {
        "tiles": len(ds), "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
        "bacc": M.balanced_accuracy(c), "precision": M.precision(c), "recall": M.recall(c),
        "dfpr": dfpr, "dtpr": dtpr,
        "parity": M.parity(scores, cov, args.threshold, args.coverage_split),
        "flags": M.count_flags(scores, args.threshold),
    }
    text = json.dumps({k: json_value(v) for k, v in result.items()}, indent=1, sort_keys=True)
    print(text)
    if args.out:
        args.out.write_text(text + "\n")
    return 0


def cmd_sweep(args) -> int:
    scene = load_scene(args.scene)
    tiles = tile_scene(scene, WindowSpec(args.window, args.stride))
    args.out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(args.seed, "sweep")

    def run(paths, tag):
        runs = []
        for p in paths:
            params, cfg, _ = load_checkpoint(p)
            strategy = cfg.imputation if cfg is not None else ImputationStrategy.parse("zero")
            runs.append(score_and_flag(tiles, params, strategy, args.threshold, seed,
                                       f"{tag}:{Path(p).name}", jobs=args.jobs))
        return runs

    runs_a = run(args.checkpoint, "a")
    runs_b = run(args.against, "b") if args.against else []
    write_flags_csv([r for run_ in runs_a + runs_b for r in run_], args.out / "flags.csv")
    for i, recs in enumerate(runs_a):
        scores = [r.score for r in recs]
        cov = [r.coverage for r in recs]
        print(f"{args.checkpoint[i]}: flags={M.count_flags(scores, args.threshold)} "
              f"parity={M.fmt(M.parity(scores, cov, args.threshold, args.coverage_split))}")
    if runs_b:
        stats = disagreement_map(aggregate_grid(runs_a, args.cell_deg), aggregate_grid(runs_b, args.cell_deg))
        write_grid_csv(stats, args.out / "grid.csv")
    return 0


def _grid_inputs(args):
    if args.train:
        train_ds = load_dataset(args.train)
    else:
        train_ds = generate_dataset(GenConfig(n_tiles=args.n_train, bias=args.bias,
                                              seed=derive_seed(args.seed, "gen", "train"), id_prefix="tr"))
    if args.test:
        test_ds = load_dataset(args.test)
    else:
        test_ds = generate_dataset(GenConfig(n_tiles=args.n_test, bias=args.bias,
                                             seed=derive_seed(args.seed, "gen", "test"), id_prefix="te"), "test")
    if args.scene:
        scene = load_scene(args.scene)
    else:
        scene = generate_scene(SceneConfig(seed=derive_seed(args.seed, "gen", "scene")))
    return train_ds, test_ds, scene


def cmd_grid(args) -> int:
    train_ds, test_ds, scene = _grid_inputs(args)
    resampling = {"off": (False,), "on": (True,), "both": (False, True)}[args.resample]
    grid = ExperimentGrid(
        models=tuple(args.models), imputations=tuple(args.imputation), resampling=resampling,
        seeds=tuple(range(args.seeds)), base_seed=derive_seed(args.seed, "grid"),
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, bins=args.bins,
        noise_scale=args.noise_scale, threshold=args.threshold, coverage_split=args.coverage_split,
        cell_deg=args.cell_deg,
    )
    report = run_grid(train_ds, test_ds, scene, grid, jobs=args.jobs)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, out / "report.csv", "csv")
    emit_report(report, out / "report.json", "json")
    if len(grid.resampling) == 2:
        write_grid_csv(report.disagreement(), out / "grid.csv")
    manifest = {
        "grid": grid.to_dict(),
        "train": train_ds.attrs, "test": test_ds.attrs,
        "scene": {"frame": scene.frame(), "shape": list(scene.raster.shape)},
        "train_configs": {k.label: grid.train_config(k, grid.seeds[0]).to_dict() for k in grid.configs()},
        "notes": "synthetic scene; no land/sea masking",
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    sys.stdout.write(report_csv(report.rows()))
    for key, seed, msg in report.errors:
        log.error("%s seed %d: %s", key.label, seed, msg)
    return 1 if report.errors else 0


def significance_marks(report, alpha: float = ALPHA) -> list[str]:
    """Text lines: resampling vs none per (model, imputation), and each imputation vs zero."""
    lines = []
    keys = {(r.key.model, r.key.imputation, r.key.resampling) for r in report.results}
    for r in report.results:
        k = r.key
        if k.resampling and (k.model, k.imputation, False) in keys:
            base = ConfigKey(k.model, k.imputation, False)
            for metric in ("abs_dfpr", "abs_dtpr", "parity", "bacc"):
                lines.append(_mark(report, metric, k, base, alpha))
        if k.imputation != "zero" and (k.model, "zero", k.resampling) in keys:
            base = ConfigKey(k.model, "zero", k.resampling)
            for metric in ("abs_dfpr", "abs_dtpr", "parity"):
                lines.append(_mark(report, metric, k, base, alpha))
    return lines


def _mark(report, metric, a, b, alpha) -> str:
    try:
        c = compare(report, metric, a, b, alpha)
    except ValueError as exc:
        return f"{metric:9s} {a.label:>16s} vs {b.label:<16s} n/a ({exc})"
    star = "*" if c.significant else " "
    return f"{metric:9s} {a.label:>16s} vs {b.label:<16s} diff={c.difference:+.4f} p={c.p_value:.4f} {star}"


def cmd_report(args) -> int:
    report = load_report(args.inp)
    if args.format == "csv":
        sys.stdout.write(report_csv(report.rows()))
        return 0
    if args.format == "json":
        sys.stdout.write(args.inp.read_text())
        return 0
    rows = report.rows()
    print(f"{'model':12s} {'imput.':7s} {'R':3s} {'BAcc':>15s} {'Precision':>15s} {'Recall':>15s} "
          f"{'dFPR':>15s} {'dTPR':>15s} {'Parity':>15s} {'Flags':>6s}")
    for row in rows:
        cells = []
        for m in ("bacc", "precision", "recall", "dfpr", "dtpr", "parity"):
            mean, std = row[f"{m}_mean"], row[f"{m}_std"]
            cells.append("n/a" if mean is None else f"{mean:.2f} ± {std:.2f}" if std is not None else f"{mean:.2f}")
        print(f"{row['model']:12s} {row['imputation']:7s} {row['resampling']:3s} "
              + " ".join(f"{c:>15s}" for c in cells) + f" {M.fmt(row['flags']) if row['flags'] is None else row['flags']:>6}")
    print()
    print(f"Welch two-sided t-tests, alpha={args.alpha} (* = significant); abs_ = distance from zero")
    for line in significance_marks(report, args.alpha):
        print(line)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "grid": cmd_grid, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
