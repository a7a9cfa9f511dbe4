"""Tiles, coverage, coverage groups and the ``.tds`` on-disk dataset format.

A ``.tds`` dataset is a directory holding two files:

``manifest.json``
    tile count, shape (C, H, W), split tag, free-form ``attrs`` and one record
    per tile (id, label, lat, lon, byte offset into the payload).
``payload.bin``
    for every tile, C*H*W little-endian float32 values (row-major C x H x W)
    followed by H*W mask bytes, each strictly 0 or 1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FORMAT_NAME = "tds"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "payload.bin"
SPLIT_TAGS = ("train", "val", "test", "deploy")
DEFAULT_COVERAGE_SPLIT = 0.5


class DatasetFormatError(ValueError):
    """Base class for problems reading or assembling a dataset."""


class MalformedManifestError(DatasetFormatError):
    pass


class ShapeMismatchError(DatasetFormatError):
    pass


class DuplicateIdError(DatasetFormatError):
    pass


class InvalidMaskError(DatasetFormatError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Tile:
    """One C x H x W raster patch with a shared validity mask.

    ``mask`` is True where a pixel is valid. ``label`` is None for
    deployment tiles. Arrays are copied and made read-only on construction.
    """

    id: str
    pixels: np.ndarray
    mask: np.ndarray
    label: int | None = None
    lat: float = 0.0
    lon: float = 0.0

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float32)
        mask = np.asarray(self.mask)
        if pixels.ndim != 3:
            raise ShapeMismatchError(f"pixels must be C x H x W, got shape {pixels.shape}")
        if mask.shape != pixels.shape[1:]:
            raise ShapeMismatchError(
                f"mask shape {mask.shape} does not match pixels H x W {pixels.shape[1:]}"
            )
        if mask.dtype != np.bool_:
            if not np.isin(mask, (0, 1)).all():
                raise InvalidMaskError("mask values must be 0/1 or boolean")
            mask = mask.astype(bool)
        if not np.isfinite(pixels).all():
            raise ValueError(f"tile {self.id!r} has non-finite pixel values")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0, 1 or None, got {self.label!r}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"lon {self.lon} outside [-180, 180)")
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "pixels", _frozen(pixels))
        object.__setattr__(self, "mask", _frozen(mask))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "lat", float(self.lat))
        object.__setattr__(self, "lon", float(self.lon))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    @property
    def coverage(self) -> float:
        return compute_coverage(self)

    def replace(self, **changes: Any) -> "Tile":
        fields = dict(
            id=self.id, pixels=self.pixels, mask=self.mask,
            label=self.label, lat=self.lat, lon=self.lon,
        )
        fields.update(changes)
        return Tile(**fields)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tile):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.lat == other.lat
            and self.lon == other.lon
            and self.pixels.shape == other.pixels.shape
            and self.pixels.tobytes() == other.pixels.tobytes()
            and np.array_equal(self.mask, other.mask)
        )

    __hash__ = None  # type: ignore[assignment]


def compute_coverage(tile: Tile) -> float:
    """Fraction of valid pixels, count / (H * W)."""
    h, w = tile.mask.shape
    return int(np.count_nonzero(tile.mask)) / (h * w)


def split_groups(
    tiles: Iterable[Tile], threshold: float = DEFAULT_COVERAGE_SPLIT
) -> tuple[list[Tile], list[Tile]]:
    """Partition tiles into (low, high) coverage groups.

    Coverage exactly at ``threshold`` goes to the high group.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    low: list[Tile] = []
    high: list[Tile] = []
    for t in tiles:
        (low if compute_coverage(t) < threshold else high).append(t)
    return low, high


def is_high_coverage(coverages: np.ndarray, threshold: float = DEFAULT_COVERAGE_SPLIT) -> np.ndarray:
    """Vectorized group membership, same rule as :func:`split_groups`."""
    return np.asarray(coverages, dtype=float) >= threshold


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered, shape-homogeneous collection of tiles."""

    tiles: tuple[Tile, ...]
    channels: int
    height: int
    width: int
    split_tag: str = "train"
    attrs: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tiles", tuple(self.tiles))
        for name in ("channels", "height", "width"):
            if int(getattr(self, name)) < 1:
                raise ShapeMismatchError(f"{name} must be positive")
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        shape = (self.channels, self.height, self.width)
        seen: set[str] = set()
        for t in self.tiles:
            if t.shape != shape:
                raise ShapeMismatchError(f"tile {t.id!r} has shape {t.shape}, dataset declares {shape}")
            if t.id in seen:
                raise DuplicateIdError(f"duplicate tile id {t.id!r}")
            seen.add(t.id)

    @classmethod
    def from_tiles(cls, tiles: Sequence[Tile], split_tag: str = "train", **attrs: Any) -> "Dataset":
        if not tiles:
            raise ValueError("cannot infer shape from an empty tile list")
        c, h, w = tiles[0].shape
        return cls(tuple(tiles), c, h, w, split_tag, dict(attrs))

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)

    def __getitem__(self, i: int) -> Tile:
        return self.tiles[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.channels, self.height, self.width, self.split_tag)
            == (other.channels, other.height, other.width, other.split_tag)
            and self.attrs == other.attrs
            and self.tiles == other.tiles
        )

    __hash__ = None  # type: ignore[assignment]

    def pixels(self) -> np.ndarray:
        """Stacked N x C x H x W float32 array."""
        if not self.tiles:
            return np.zeros((0, self.channels, self.height, self.width), np.float32)
        return np.stack([t.pixels for t in self.tiles])

    def masks(self) -> np.ndarray:
        if not self.tiles:
            return np.zeros((0, self.height, self.width), bool)
        return np.stack([t.mask for t in self.tiles])

    def labels(self) -> np.ndarray:
        if any(t.label is None for t in self.tiles):
            raise ValueError("dataset contains unlabeled tiles")
        return np.array([t.label for t in self.tiles], dtype=np.int64)

    def coverages(self) -> np.ndarray:
        return np.array([compute_coverage(t) for t in self.tiles], dtype=float)


def _record_bytes(c: int, h: int, w: int) -> int:
    return c * h * w * 4 + h * w


def save_dataset(ds: Dataset, path: str | os.PathLike) -> Path:
    """Write ``ds`` as a ``.tds`` directory; returns the directory path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rec = _record_bytes(ds.channels, ds.height, ds.width)
    records = []
    with open(root / PAYLOAD_NAME, "wb") as fh:
        for i, t in enumerate(ds.tiles):
            fh.write(t.pixels.astype("<f4", copy=False).tobytes(order="C"))
            fh.write(t.mask.astype(np.uint8).tobytes(order="C"))
            records.append({"id": t.id, "label": t.label, "lat": t.lat, "lon": t.lon, "offset": i * rec})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tile_count": len(ds.tiles),
        "channels": ds.channels,
        "height": ds.height,
        "width": ds.width,
        "split_tag": ds.split_tag,
        "attrs": ds.attrs,
        "tiles": records,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def _read_manifest(root: Path) -> dict[str, Any]:
    try:
        manifest = json.loads((root / MANIFEST_NAME).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedManifestError(f"{root / MANIFEST_NAME}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise MalformedManifestError("manifest is not a tds manifest")
    required = ("tile_count", "channels", "height", "width", "split_tag", "tiles")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise MalformedManifestError(f"manifest missing keys: {missing}")
    if not isinstance(manifest["tiles"], list):
        raise MalformedManifestError("manifest 'tiles' must be a list")
    for k in ("tile_count", "channels", "height", "width"):
        if not isinstance(manifest[k], int) or manifest[k] < 0:
            raise MalformedManifestError(f"manifest {k!r} must be a non-negative integer")
    if manifest["tile_count"] != len(manifest["tiles"]):
        raise MalformedManifestError(
            f"tile_count {manifest['tile_count']} but {len(manifest['tiles'])} tile records"
        )
    for rec in manifest["tiles"]:
        if not isinstance(rec, dict) or not {"id", "label", "lat", "lon", "offset"} <= rec.keys():
            raise MalformedManifestError(f"bad tile record: {rec!r}")
    return manifest


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    m = _read_manifest(root)
    c, h, w = m["channels"], m["height"], m["width"]
    rec = _record_bytes(c, h, w)
    payload = (root / PAYLOAD_NAME).read_bytes()
    n = m["tile_count"]
    if len(payload) != n * rec:
        raise ShapeMismatchError(
            f"manifest declares {n} tiles of {rec} bytes ({n * rec} total), payload has {len(payload)} bytes"
        )
    ids = [r["id"] for r in m["tiles"]]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise DuplicateIdError(f"duplicate tile id {dup!r} in manifest")
    tiles = []
    npix = c * h * w
    for r in m["tiles"]:
        off = r["offset"]
        if not isinstance(off, int) or off < 0 or off + rec > len(payload):
            raise ShapeMismatchError(f"tile {r['id']!r} offset {off} outside payload")
        pixels = np.frombuffer(payload, dtype="<f4", count=npix, offset=off).reshape(c, h, w)
        mask_bytes = np.frombuffer(payload, dtype=np.uint8, count=h * w, offset=off + npix * 4)
        if mask_bytes.max(initial=0) > 1:
            raise InvalidMaskError(f"tile {r['id']!r} has mask bytes other than 0/1")
        tiles.append(
            Tile(
                id=r["id"],
                pixels=pixels.astype(np.float32),
                mask=mask_bytes.reshape(h, w).astype(bool),
                label=r["label"],
                lat=r["lat"],
                lon=r["lon"],
            )
        )
    return Dataset(tuple(tiles), c, h, w, m["split_tag"], dict(m.get("attrs") or {}))
