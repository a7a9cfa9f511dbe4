"""Deployment sweep: sliding windows over a scene, scoring, flagging, and
per-cell aggregation on a regular lat/lon grid.

Grid cells are ``cell_deg`` degrees square, anchored at (-90, -180), lower
edge inclusive and upper edge exclusive. Latitude 90 exactly falls into the
northernmost row.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .impute import ImputationStrategy, impute_arrays
from .model import ModelParams, forward_batch
from .synthgen import Scene
from .tiles import Tile, compute_coverage

DEFAULT_CELL_DEG = 3.0
PCT_EPS = 1e-12


@dataclass(frozen=True)
class WindowSpec:
    size: int = 32
    stride: int = 16

    def __post_init__(self) -> None:
        if self.size < 1 or self.stride < 1:
            raise ValueError("window size and stride must be positive")


def window_offsets(dim: int, size: int, stride: int) -> list[int]:
    """Offsets 0, stride, 2*stride, ... while the whole window fits."""
    if dim < size:
        raise ValueError(f"dimension {dim} smaller than window {size}")
    return list(range(0, dim - size + 1, stride))


def window_count(dim: int, size: int, stride: int) -> int:
    return (dim - size) // stride + 1


def tile_scene(scene: Scene, spec: WindowSpec = WindowSpec()) -> list[Tile]:
    """Crop ``scene`` into windows, row-major. Each tile is located at its centre."""
    r = scene.raster
    rows = window_offsets(scene.height, spec.size, spec.stride)
    cols = window_offsets(scene.width, spec.size, spec.stride)
    half = spec.size / 2
    tiles = []
    for r0 in rows:
        for c0 in cols:
            lat, lon = scene.latlon(r0 + half, c0 + half)
            tiles.append(
                Tile(
                    id=f"{r.id}_r{r0:05d}_c{c0:05d}",
                    pixels=r.pixels[:, r0 : r0 + spec.size, c0 : c0 + spec.size],
                    mask=r.mask[r0 : r0 + spec.size, c0 : c0 + spec.size],
                    label=None,
                    lat=lat,
                    lon=lon,
                )
            )
    return tiles


@dataclass(frozen=True)
class FlagRecord:
    id: str
    lat: float
    lon: float
    score: float
    flagged: bool
    coverage: float
    config: str = ""


def _score_chunk(tiles: Sequence[Tile], params: ModelParams, strategy: ImputationStrategy, seed: int) -> np.ndarray:
    pixels = np.stack([t.pixels for t in tiles])
    masks = np.stack([t.mask for t in tiles])
    filled, _ = impute_arrays(pixels, masks, [t.id for t in tiles], strategy, seed)
    return forward_batch(params, filled)


def score_and_flag(
    tiles: Sequence[Tile],
    params: ModelParams,
    strategy: ImputationStrategy,
    threshold: float = 0.5,
    seed: int = 0,
    config: str = "",
    jobs: int = 1,
    chunk: int = 256,
) -> list[FlagRecord]:
    """Impute, score and threshold every tile (flag iff score >= threshold).

    Results do not depend on ``jobs`` or ``chunk``: imputation noise is keyed
    by tile id and the model is applied per tile.
    """
    tiles = list(tiles)
    if not tiles:
        return []
    chunks = [tiles[i : i + chunk] for i in range(0, len(tiles), chunk)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda c: _score_chunk(c, params, strategy, seed), chunks))
    else:
        parts = [_score_chunk(c, params, strategy, seed) for c in chunks]
    scores = np.concatenate(parts)
    return [
        FlagRecord(t.id, t.lat, t.lon, float(s), bool(s >= threshold), compute_coverage(t), config)
        for t, s in zip(tiles, scores)
    ]


def cell_index(lat: float, lon: float, cell_deg: float = DEFAULT_CELL_DEG) -> tuple[int, int]:
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon < 180.0:
        raise ValueError(f"coordinate ({lat}, {lon}) outside [-90, 90] x [-180, 180)")
    n_lat = math.ceil(180.0 / cell_deg)
    i = min(math.floor((lat + 90.0) / cell_deg), n_lat - 1)
    j = math.floor((lon + 180.0) / cell_deg)
    return i, j


def cell_origin(index: tuple[int, int], cell_deg: float = DEFAULT_CELL_DEG) -> tuple[float, float]:
    """South-west corner (lat, lon) of a cell."""
    return -90.0 + index[0] * cell_deg, -180.0 + index[1] * cell_deg


@dataclass(frozen=True)
class GridCounts:
    """Mean flag count per cell over ``runs`` flag lists. Empty cells are omitted."""

    cell_deg: float
    counts: dict[tuple[int, int], float] = field(default_factory=dict)
    runs: int = 1

    @property
    def total(self) -> float:
        return math.fsum(self.counts.values())


def aggregate_grid(
    runs: Iterable[Sequence[FlagRecord]], cell_deg: float = DEFAULT_CELL_DEG
) -> GridCounts:
    """Count flagged tiles per cell in each run, then average over runs."""
    if cell_deg <= 0:
        raise ValueError("cell_deg must be positive")
    runs = [list(r) for r in runs]
    if not runs:
        return GridCounts(cell_deg, {}, 0)
    totals: dict[tuple[int, int], int] = {}
    for records in runs:
        for rec in records:
            idx = cell_index(rec.lat, rec.lon, cell_deg)
            if rec.flagged:
                totals[idx] = totals.get(idx, 0) + 1
    n = len(runs)
    return GridCounts(cell_deg, {k: totals[k] / n for k in sorted(totals)}, n)


@dataclass(frozen=True)
class GridCellStats:
    cell: tuple[int, int]
    cell_lat: float
    cell_lon: float
    count_a: float
    count_b: float
    mean: float
    abs_pct_diff: float


def abs_pct_diff(a: float, b: float, eps: float = PCT_EPS) -> float:
    """|a - b| relative to their mean, in percent; 0 when both are 0."""
    if a == 0 and b == 0:
        return 0.0
    return abs(a - b) / max((a + b) / 2.0, eps) * 100.0


def disagreement_map(a: GridCounts, b: GridCounts, eps: float = PCT_EPS) -> list[GridCellStats]:
    """Per-cell absolute percentage difference over the union of non-empty cells."""
    if a.cell_deg != b.cell_deg:
        raise ValueError(f"grid mismatch: {a.cell_deg} vs {b.cell_deg} degree cells")
    out = []
    for cell in sorted(set(a.counts) | set(b.counts)):
        ca, cb = a.counts.get(cell, 0.0), b.counts.get(cell, 0.0)
        lat, lon = cell_origin(cell, a.cell_deg)
        out.append(GridCellStats(cell, lat, lon, ca, cb, (ca + cb) / 2.0, abs_pct_diff(ca, cb, eps)))
    return out


FLAGS_COLUMNS = ("id", "lat", "lon", "score", "flagged", "coverage", "config")
GRID_COLUMNS = ("cell_lat", "cell_lon", "count_a", "count_b", "abs_pct_diff")


def write_flags_csv(records: Iterable[FlagRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLAGS_COLUMNS)
        for r in records:
            w.writerow([r.id, repr(r.lat), repr(r.lon), repr(r.score), int(r.flagged), repr(r.coverage), r.config])
    return path


def write_grid_csv(stats: Iterable[GridCellStats], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for s in stats:
            w.writerow([repr(s.cell_lat), repr(s.cell_lon), repr(s.count_a), repr(s.count_b), repr(s.abs_pct_diff)])
    return path
