"""Fill missing pixels before a tile reaches the model.

Four strategies, all using statistics of the tile itself (no dataset state):

zero
    missing pixels become 0.0
median
    per-channel median of the valid pixels
sample
    per missing pixel, a value drawn with replacement from the channel's
    valid pixels
noise
    channel median plus Gaussian noise with std ``noise_scale * sigma``,
    sigma being the channel's valid-pixel standard deviation

Random strategies draw from a stream keyed on ``(seed, tile.id)``, so the
result for a tile does not depend on which other tiles are processed or in
what order. A tile with no valid pixels is filled with 0.0 and reported
through :class:`EmptyTileWarning` (a fully clouded deployment window is not
an error).
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import generator
from .tiles import Dataset, Tile


class ImputationKind(enum.Enum):
    ZERO = "zero"
    MEDIAN = "median"
    PIXEL_SAMPLE = "sample"
    NOISE_AUGMENTED = "noise"


class EmptyTileWarning(UserWarning):
    """A statistics-based strategy met a tile with no valid pixels."""


@dataclass(frozen=True)
class ImputationStrategy:
    kind: ImputationKind
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    @classmethod
    def parse(cls, name: str, noise_scale: float = 1.0) -> "ImputationStrategy":
        return cls(ImputationKind(name.lower()), noise_scale)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def is_random(self) -> bool:
        return self.kind in (ImputationKind.PIXEL_SAMPLE, ImputationKind.NOISE_AUGMENTED)


ZERO = ImputationStrategy(ImputationKind.ZERO)
MEDIAN = ImputationStrategy(ImputationKind.MEDIAN)
PIXEL_SAMPLE = ImputationStrategy(ImputationKind.PIXEL_SAMPLE)
NOISE_AUGMENTED = ImputationStrategy(ImputationKind.NOISE_AUGMENTED)
ALL_STRATEGIES = (ZERO, MEDIAN, PIXEL_SAMPLE, NOISE_AUGMENTED)


def _fill(
    pixels: np.ndarray, mask: np.ndarray, strategy: ImputationStrategy, seed: int, tile_id: str
) -> tuple[np.ndarray, bool]:
    """Return (filled float32 copy, fell_back_to_zero)."""
    out = np.array(pixels, dtype=np.float32, copy=True)
    missing = ~mask
    n_missing = int(np.count_nonzero(missing))
    if n_missing == 0:
        return out, False
    kind = strategy.kind
    if kind is ImputationKind.ZERO:
        out[:, missing] = 0.0
        return out, False
    if n_missing == mask.size:
        out[:, missing] = 0.0
        return out, True

    rng = generator(seed, "impute", tile_id) if strategy.is_random else None
    for ch in range(out.shape[0]):
        valid = out[ch][mask]
        if kind is ImputationKind.MEDIAN:
            out[ch][missing] = np.float32(np.median(valid.astype(np.float64)))
        elif kind is ImputationKind.PIXEL_SAMPLE:
            out[ch][missing] = valid[rng.integers(0, valid.size, size=n_missing)]
        else:
            v64 = valid.astype(np.float64)
            sd = strategy.noise_scale * float(np.std(v64))
            eps = rng.normal(0.0, 1.0, size=n_missing) * sd
            out[ch][missing] = (np.median(v64) + eps).astype(np.float32)
    return out, False


def impute_report(tile: Tile, strategy: ImputationStrategy, seed: int = 0) -> tuple[Tile, bool]:
    """Like :func:`impute`, also returning whether the zero fallback was used."""
    filled, fallback = _fill(tile.pixels, tile.mask, strategy, seed, tile.id)
    return tile.replace(pixels=filled), fallback


def impute(tile: Tile, strategy: ImputationStrategy, seed: int = 0) -> Tile:
    """Return a copy of ``tile`` with every missing pixel filled.

    Valid pixels, mask, id, label and location are carried over unchanged.
    """
    out, fallback = impute_report(tile, strategy, seed)
    if fallback:
        warnings.warn(
            f"tile {tile.id!r} has no valid pixels; {strategy.name} fell back to zero fill",
            EmptyTileWarning,
            stacklevel=2,
        )
    return out


def impute_arrays(
    pixels: np.ndarray,
    masks: np.ndarray,
    ids: Sequence[str],
    strategy: ImputationStrategy,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Batch form over N x C x H x W pixels and N x H x W masks.

    Gives the same values as calling :func:`impute` per tile. Returns the
    filled float32 array and a boolean array marking zero-fallback tiles.
    """
    pixels = np.asarray(pixels, dtype=np.float32)
    masks = np.asarray(masks, dtype=bool)
    if pixels.shape[0] != masks.shape[0] or pixels.shape[0] != len(ids):
        raise ValueError("pixels, masks and ids disagree on tile count")
    if strategy.kind is ImputationKind.ZERO:
        out = np.where(masks[:, None], pixels, np.float32(0.0)).astype(np.float32)
        return out, np.zeros(len(ids), bool)
    out = np.empty_like(pixels)
    fallback = np.zeros(len(ids), bool)
    for i, tid in enumerate(ids):
        out[i], fallback[i] = _fill(pixels[i], masks[i], strategy, seed, tid)
    return out, fallback


def impute_dataset_arrays(ds: Dataset, strategy: ImputationStrategy, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    return impute_arrays(ds.pixels(), ds.masks(), [t.id for t in ds.tiles], strategy, seed)
