"""Configuration grid runner, significance comparisons and report files.

A grid is the product models x imputations x resampling. Every (config,
seed) run trains on the training set, scores the test set (BAcc, precision,
recall, delta FPR, delta TPR) and sweeps the deployment scene (parity and
flag count). Per-config rows hold mean and sample std over seeds.

Seeds depend only on ``(base_seed, seed)``, never on which other configs
are in the grid, so adding or removing a config leaves the others' numbers
untouched. Runs that share an imputation strategy and seed reuse one
imputed copy of the data.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import stats

from . import metrics as M
from .impute import ImputationStrategy, impute_arrays, impute_dataset_arrays
from .model import ModelKind, TrainConfig, forward_batch, train
from .resample import BinSpec
from .rng import derive_seed
from .sweep import (
    DEFAULT_CELL_DEG, FlagRecord, GridCellStats, GridCounts, WindowSpec,
    aggregate_grid, disagreement_map, score_and_flag, tile_scene,
)
from .synthgen import Scene
from .tiles import DEFAULT_COVERAGE_SPLIT, Dataset, Tile

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "model", "imputation", "resampling",
    "bacc_mean", "bacc_std", "precision_mean", "precision_std", "recall_mean", "recall_std",
    "dfpr_mean", "dfpr_std", "dtpr_mean", "dtpr_std", "parity_mean", "parity_std", "flags",
)
METRICS = ("bacc", "precision", "recall", "dfpr", "dtpr", "parity", "flags")
IMPUTATION_ORDER = ("zero", "median", "sample", "noise")
ALPHA = 0.05


@dataclass(frozen=True, order=True)
class ConfigKey:
    model: str
    imputation: str
    resampling: bool

    @property
    def label(self) -> str:
        return f"{ModelKind(self.model).short}-{self.imputation}-{'R' if self.resampling else 'noR'}"

    def sort_key(self) -> tuple:
        return (
            [k.value for k in ModelKind].index(self.model),
            IMPUTATION_ORDER.index(self.imputation),
            self.resampling,
        )


@dataclass
class ExperimentGrid:
    models: Sequence[str] = ("vanilla", "multibranch")
    imputations: Sequence[str] = IMPUTATION_ORDER
    resampling: Sequence[bool] = (False, True)
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    base_seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1.0
    bins: int = 10
    noise_scale: float = 1.0
    threshold: float = M.DEFAULT_THRESHOLD
    coverage_split: float = DEFAULT_COVERAGE_SPLIT
    window: int = 32
    stride: int = 16
    cell_deg: float = DEFAULT_CELL_DEG

    def __post_init__(self) -> None:
        for name in ("models", "imputations", "resampling", "seeds"):
            if not list(getattr(self, name)):
                raise ValueError(f"grid dimension {name!r} is empty")
        for m in self.models:
            ModelKind(m)
        for i in self.imputations:
            ImputationStrategy.parse(i)

    def configs(self) -> list[ConfigKey]:
        keys = {ConfigKey(m, i, bool(r)) for m in self.models for i in self.imputations for r in self.resampling}
        return sorted(keys, key=ConfigKey.sort_key)

    def run_seed(self, seed: int) -> int:
        return derive_seed(self.base_seed, "run", seed)

    def train_config(self, key: ConfigKey, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.run_seed(seed),
            imputation=ImputationStrategy.parse(key.imputation, self.noise_scale),
            resample=key.resampling,
            bins=BinSpec(self.bins),
            threshold=self.threshold,
        )

    def to_dict(self) -> dict:
        return {
            "models": list(self.models), "imputations": list(self.imputations),
            "resampling": [bool(r) for r in self.resampling], "seeds": list(self.seeds),
            "base_seed": self.base_seed, "epochs": self.epochs, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "bins": self.bins, "noise_scale": self.noise_scale,
            "threshold": self.threshold, "coverage_split": self.coverage_split,
            "window": self.window, "stride": self.stride, "cell_deg": self.cell_deg,
        }


@dataclass
class ConfigResult:
    key: ConfigKey
    per_seed: dict[int, dict[str, M.Metric]] = field(default_factory=dict)
    flags: dict[int, list[FlagRecord]] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def values(self, metric: str) -> list[M.Metric]:
        return [self.per_seed[s][metric] for s in sorted(self.per_seed)]

    def row(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "model": self.key.model,
            "imputation": self.key.imputation,
            "resampling": "on" if self.key.resampling else "off",
        }
        if self.failed or not self.per_seed:
            for col in REPORT_COLUMNS[3:]:
                out[col] = None
            return out
        for m in METRICS[:-1]:
            mean, std = M.aggregate_seeds(self.values(m))
            out[f"{m}_mean"], out[f"{m}_std"] = mean, std
        flags_mean, _ = M.aggregate_seeds(self.values("flags"))
        out["flags"] = int(round(flags_mean)) if flags_mean is not None else None
        return out


@dataclass
class GridReport:
    grid: ExperimentGrid
    results: list[ConfigResult]

    @property
    def errors(self) -> list[tuple[ConfigKey, int, str]]:
        return [(r.key, s, msg) for r in self.results for s, msg in sorted(r.errors.items())]

    def result(self, key: ConfigKey) -> ConfigResult:
        for r in self.results:
            if r.key == key:
                return r
        raise KeyError(key)

    def rows(self) -> list[dict[str, Any]]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", M.SingleSeedWarning)
            return [r.row() for r in self.results]

    def flag_grid(self, resampling: bool) -> GridCounts:
        """Mean flags per cell over every run (model x imputation x seed) with this resampling flag."""
        runs = [
            recs for r in self.results if r.key.resampling == resampling
            for _, recs in sorted(r.flags.items())
        ]
        return aggregate_grid(runs, self.grid.cell_deg)

    def disagreement(self) -> list[GridCellStats]:
        """Resampled (a) vs standard (b) per-cell flag disagreement."""
        return disagreement_map(self.flag_grid(True), self.flag_grid(False))


def _evaluate(params, test_x, test_ds: Dataset, deploy_tiles, strategy, seed, grid: ExperimentGrid, label):
    test_scores = forward_batch(params, test_x)
    recs = score_and_flag(deploy_tiles, params, strategy, grid.threshold, seed, label)
    m = M.seed_metrics(
        test_scores, test_ds.labels(), test_ds.coverages(),
        [r.score for r in recs], [r.coverage for r in recs],
        grid.threshold, grid.coverage_split,
    )
    return m, recs


def _run_unit(
    imputation: str,
    seed: int,
    keys: list[ConfigKey],
    train_ds: Dataset,
    test_ds: Dataset,
    deploy_tiles: list[Tile],
    grid: ExperimentGrid,
    out: dict[ConfigKey, ConfigResult],
    lock: threading.Lock,
) -> None:
    """All configs sharing one (imputation, seed): impute once, train each."""
    try:
        cfg0 = grid.train_config(keys[0], seed)
        imp_seed = derive_seed(cfg0.seed, "impute")
        train_x, _ = impute_dataset_arrays(train_ds, cfg0.imputation, imp_seed)
        test_x, _ = impute_dataset_arrays(test_ds, cfg0.imputation, imp_seed)
    except Exception as exc:  # recorded per config, grid continues
        with lock:
            for k in keys:
                out[k].errors[seed] = f"{type(exc).__name__}: {exc}"
        return
    for key in keys:
        try:
            cfg = grid.train_config(key, seed)
            params = train(train_ds, ModelKind(key.model), cfg, imputed=train_x)
            m, recs = _evaluate(params, test_x, test_ds, deploy_tiles, cfg.imputation, imp_seed, grid, key.label)
        except Exception as exc:
            log.exception("config %s seed %s failed", key.label, seed)
            with lock:
                out[key].errors[seed] = f"{type(exc).__name__}: {exc}"
            continue
        with lock:
            out[key].per_seed[seed] = m
            out[key].flags[seed] = recs
        log.info("%s seed %d: bacc=%s dfpr=%s parity=%s", key.label, seed,
                 M.fmt(m["bacc"]), M.fmt(m["dfpr"]), M.fmt(m["parity"]))


def run_grid(
    train_ds: Dataset,
    test_ds: Dataset,
    deploy: Scene | Sequence[Tile],
    grid: ExperimentGrid = ExperimentGrid(),
    jobs: int = 1,
) -> GridReport:
    """Run every (config, seed) of ``grid``; failures become error entries, not exceptions."""
    if isinstance(deploy, Scene):
        deploy_tiles = tile_scene(deploy, WindowSpec(grid.window, grid.stride))
    else:
        deploy_tiles = list(deploy)
    keys = grid.configs()
    out = {k: ConfigResult(k) for k in keys}
    lock = threading.Lock()
    units = []
    for imp in dict.fromkeys(k.imputation for k in keys):
        for seed in grid.seeds:
            units.append((imp, seed, [k for k in keys if k.imputation == imp]))
    args = [(imp, seed, ks, train_ds, test_ds, deploy_tiles, grid, out, lock) for imp, seed, ks in units]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(lambda a: _run_unit(*a), args))
    else:
        for a in args:
            _run_unit(*a)
    return GridReport(grid, [out[k] for k in keys])


# --- significance ----------------------------------------------------------


@dataclass(frozen=True)
class Comparison:
    difference: float  # mean(a) - mean(b)
    t_stat: float
    df: float
    p_value: float
    significant: bool


def welch_test(a: Sequence[float], b: Sequence[float], alpha: float = ALPHA) -> Comparison:
    """Two-sided Welch t-test.

    Zero variance on both sides: equal means give p = 1, different means are
    an infinite t statistic and count as significant (p = 0).
    """
    a = np.asarray([float(x) for x in a])
    b = np.asarray([float(x) for x in b])
    if a.size < 2 or b.size < 2:
        raise ValueError("Welch test needs at least two seeds per side")
    diff = float(a.mean() - b.mean())
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return Comparison(0.0, 0.0, math.inf, 1.0, False)
        return Comparison(diff, math.copysign(math.inf, diff), math.inf, 0.0, True)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return Comparison(diff, t, df, p, p < alpha)


def compare(report: GridReport, metric: str, a: ConfigKey, b: ConfigKey, alpha: float = ALPHA) -> Comparison:
    """Welch test of ``metric`` between two configurations over their seeds.

    For the group gaps (dfpr, dtpr) pass ``metric="abs_dfpr"`` etc. to test
    distance from zero.
    """
    def vals(key):
        name = metric[4:] if metric.startswith("abs_") else metric
        raw = [v for v in report.result(key).values(name) if v is not None]
        return [abs(v) for v in raw] if metric.startswith("abs_") else raw

    va, vb = vals(a), vals(b)
    if len(va) < 2 or len(vb) < 2:
        raise ValueError(f"{metric}: need >= 2 defined seed values per side, got {len(va)} and {len(vb)}")
    return welch_test(va, vb, alpha)


# --- report files ----------------------------------------------------------


def _cell(v: Any) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, int):
        return str(v)
    return M.fmt(v)


def json_value(v: Any) -> Any:
    if v is None:
        return "n/a"
    if isinstance(v, float) and math.isinf(v):
        return M.fmt(v)
    return v


def report_csv(rows: Iterable[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([_cell(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_json(report: GridReport) -> str:
    doc = {
        "columns": list(REPORT_COLUMNS),
        "rows": [{c: json_value(row[c]) for c in REPORT_COLUMNS} for row in report.rows()],
        "per_seed": [
            {
                "model": r.key.model, "imputation": r.key.imputation,
                "resampling": "on" if r.key.resampling else "off",
                "seeds": {str(s): {k: json_value(v) for k, v in r.per_seed[s].items()} for s in sorted(r.per_seed)},
                "errors": {str(s): msg for s, msg in sorted(r.errors.items())},
            }
            for r in report.results
        ],
        "grid": report.grid.to_dict(),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def emit_report(report: GridReport, path: str | os.PathLike, fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "csv":
        path.write_text(report_csv(report.rows()))
    elif fmt == "json":
        path.write_text(report_json(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def _fromjson_value(v: Any) -> M.Metric:
    if v == "n/a":
        return None
    if v in ("inf", "-inf"):
        return float(v)
    return v


def load_report(path: str | os.PathLike) -> GridReport:
    """Rebuild a report (per-seed values only, no flag records) from its JSON file."""
    doc = json.loads(Path(path).read_text())
    grid = ExperimentGrid(**{**doc["grid"], "resampling": tuple(doc["grid"]["resampling"])})
    results = []
    for entry in doc["per_seed"]:
        key = ConfigKey(entry["model"], entry["imputation"], entry["resampling"] == "on")
        res = ConfigResult(key)
        for s, vals in entry["seeds"].items():
            res.per_seed[int(s)] = {k: _fromjson_value(v) for k, v in vals.items()}
        res.errors = {int(s): msg for s, msg in entry["errors"].items()}
        results.append(res)
    return GridReport(grid, results)
