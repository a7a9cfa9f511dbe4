"""Coverage-binned class-balanced resampling.

Coverage is cut into ``bin_count`` equal-width bins on [0, 1]. Each bin keeps
a share of the total sampling mass proportional to its tile count, and that
share is split evenly between the classes present in the bin. A bin holding
only one class spreads its share uniformly over its tiles. The label then
carries no information about the coverage bin within an epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import generator
from .tiles import Dataset

DEFAULT_BINS = 10


@dataclass(frozen=True)
class BinSpec:
    bin_count: int = DEFAULT_BINS

    def __post_init__(self) -> None:
        if self.bin_count < 1:
            raise ValueError("bin_count must be positive")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bin_count + 1)


def assign_bin(coverage: float, spec: BinSpec) -> int:
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage {coverage} outside [0, 1]")
    return min(math.floor(coverage * spec.bin_count), spec.bin_count - 1)


def assign_bins(coverages: np.ndarray, spec: BinSpec) -> np.ndarray:
    cov = np.asarray(coverages, dtype=float)
    if cov.size and (cov.min() < 0.0 or cov.max() > 1.0):
        raise ValueError("coverage outside [0, 1]")
    return np.minimum(np.floor(cov * spec.bin_count).astype(np.int64), spec.bin_count - 1)


@dataclass(frozen=True, eq=False)
class SamplerPlan:
    weights: np.ndarray
    bin_of: np.ndarray
    labels: np.ndarray
    spec: BinSpec

    def __len__(self) -> int:
        return len(self.weights)

    def class_mass(self) -> dict[tuple[int, int], float]:
        """Total weight per (bin, class) pair present in the data."""
        out: dict[tuple[int, int], float] = {}
        for b, y, w in zip(self.bin_of.tolist(), self.labels.tolist(), self.weights.tolist()):
            out[(b, y)] = out.get((b, y), 0.0) + w
        return out


def plan_from_arrays(labels: np.ndarray, coverages: np.ndarray, spec: BinSpec) -> SamplerPlan:
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot build a sampler plan for an empty dataset")
    if len(coverages) != n:
        raise ValueError("labels and coverages differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    bins = assign_bins(coverages, spec)
    counts = np.zeros((spec.bin_count, 2), dtype=np.int64)
    np.add.at(counts, (bins, labels), 1)
    per_bin = counts.sum(axis=1)
    classes_present = (counts > 0).sum(axis=1)
    # bin mass n_b / n, split evenly over the classes present in the bin
    w = per_bin[bins] / (n * classes_present[bins] * counts[bins, labels])
    w = w / w.sum()
    return SamplerPlan(w, bins, labels, spec)


def build_plan(ds: Dataset, spec: BinSpec = BinSpec()) -> SamplerPlan:
    """Per-tile sampling weights for ``ds``. Every tile must be labeled."""
    if len(ds) == 0:
        raise ValueError("cannot build a sampler plan for an empty dataset")
    unlabeled = [t.id for t in ds.tiles if t.label is None]
    if unlabeled:
        raise ValueError(f"resampling needs labels; {len(unlabeled)} unlabeled tiles, e.g. {unlabeled[0]!r}")
    return plan_from_arrays(ds.labels(), ds.coverages(), spec)


def draw_epoch(plan: SamplerPlan, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` tile indices i.i.d. with replacement from the plan."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rng = generator(seed, "draw_epoch")
    return rng.choice(len(plan.weights), size=n, replace=True, p=plan.weights).astype(np.int64)
