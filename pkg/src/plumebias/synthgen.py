"""Synthetic tiles with a controllable label/coverage coupling.

Each tile is Gaussian background noise per channel. Channel 0 is the plume
channel; channels 1..C-1 carry smooth label-free texture. Missing pixels are
the union of random elliptical cloud blobs grown until the tile reaches a
target coverage drawn from a mixture over [coverage_min, 1]. Given the
realized coverage ``cov`` a tile is a plume tile with probability::

    plume_rate * (1 - bias + 2 * bias * cov)      (clamped to [0, 1])

so ``bias = 0`` makes label and coverage independent and ``bias = 1`` makes
plumes twice as common as average in fully clear tiles and rare in cloudy
ones. The plume is a 2-D Gaussian bump in channel 0 centred on a valid pixel.
Missing pixels hold ``placeholder``.

Scenes for the deployment sweep come from :func:`generate_scene`: one large
raster with its own cloud field and plumes dropped at random locations,
independently of the clouds.
"""

from __future__ import annotations

import csv
import functools
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import generator
from .tiles import Dataset, Tile, load_dataset, save_dataset

GROUND_TRUTH_NAME = "ground_truth.csv"


@dataclass(frozen=True)
class GenConfig:
    n_tiles: int = 1000
    channels: int = 3
    size: int = 32
    plume_rate: float = 0.5
    bias: float = 0.0
    coverage_min: float = 0.05
    clear_fraction: float = 0.15  # mixture weight of the U(0.9, 1) near-clear component
    cloud_radius_max: float = 16.0
    plume_amplitude: float = 1.0
    plume_width: float = 4.0  # gaussian sigma, pixels
    plume_centered: bool = False
    background: float = 0.3
    tile_jitter: float = 0.05  # per-tile background offset sigma
    noise_sigma: float = 0.15
    texture_amplitude: float = 0.3
    placeholder: float = 0.0
    seed: int = 0
    id_prefix: str = "t"

    def __post_init__(self) -> None:
        if self.n_tiles < 0:
            raise ValueError("n_tiles must be >= 0")
        if self.channels < 1 or self.size < 3:
            raise ValueError("need channels >= 1 and size >= 3")
        if not 0.0 <= self.plume_rate <= 1.0:
            raise ValueError("plume_rate must lie in [0, 1]")
        if not 0.0 <= self.bias <= 1.0:
            raise ValueError("bias must lie in [0, 1]")
        if not 0.0 <= self.coverage_min <= 1.0 or not 0.0 <= self.clear_fraction <= 1.0:
            raise ValueError("coverage_min and clear_fraction must lie in [0, 1]")
        if self.plume_width <= 0 or self.plume_width > self.size:
            raise ValueError(f"plume_width {self.plume_width} infeasible for {self.size}px tiles")
        if self.cloud_radius_max < 1:
            raise ValueError("cloud_radius_max must be >= 1")
        for name in ("plume_amplitude", "tile_jitter", "noise_sigma", "texture_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def plume_probability(coverage, plume_rate: float, bias: float):
    p = plume_rate * (1.0 - bias + 2.0 * bias * np.asarray(coverage, dtype=float))
    return np.clip(p, 0.0, 1.0)


@functools.lru_cache(maxsize=16)
def _grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    return np.arange(shape[0], dtype=float)[:, None], np.arange(shape[1], dtype=float)[None, :]


def _ellipse(shape: tuple[int, int], cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = _grid(shape)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def grow_clouds(
    rng: np.random.Generator, shape: tuple[int, int], target: float, radius_max: float
) -> np.ndarray:
    """Carve elliptical blobs out of an all-valid mask until coverage <= target.

    Each blob is sized to the remaining deficit, so the result lands close to
    (never above) ``target``.
    """
    mask = np.ones(shape, dtype=bool)
    area = shape[0] * shape[1]
    for _ in range(10_000):
        cov = mask.sum() / area
        if cov <= target:
            break
        deficit = (cov - target) * area
        r = min(radius_max, max(0.75, math.sqrt(deficit / math.pi)))
        elong = rng.uniform(0.6, 1.6)
        a, b = r * elong, r / elong
        cy, cx = rng.uniform(-0.2, 1.2) * shape[0], rng.uniform(-0.2, 1.2) * shape[1]
        if deficit < area * 0.1:
            # small remainder: anchor on a valid pixel so the blob bites
            vy, vx = np.nonzero(mask)
            j = rng.integers(vy.size)
            cy, cx = float(vy[j]), float(vx[j])
        mask &= ~_ellipse(shape, cy, cx, a, b, rng.uniform(0, math.pi))
    return mask


def _gaussian_bump(shape: tuple[int, int], cy: float, cx: float, sigma: float) -> np.ndarray:
    yy, xx = _grid(shape)
    k = -0.5 / (sigma * sigma)
    # separable: outer product of two 1-D profiles
    return np.exp(k * (yy - cy) ** 2) * np.exp(k * (xx - cx) ** 2)


def _texture(rng: np.random.Generator, shape: tuple[int, int], amplitude: float) -> np.ndarray:
    tex = np.zeros(shape)
    if amplitude == 0:
        return tex
    for _ in range(3):
        cy, cx = rng.uniform(0, shape[0]), rng.uniform(0, shape[1])
        sigma = rng.uniform(0.15, 0.4) * max(shape)
        tex += rng.normal(0.0, amplitude) * _gaussian_bump(shape, cy, cx, sigma)
    return tex


def _background(rng: np.random.Generator, cfg: GenConfig, shape: tuple[int, int]) -> np.ndarray:
    offset = rng.normal(0.0, cfg.tile_jitter) if cfg.tile_jitter else 0.0
    out = np.empty((cfg.channels,) + shape)
    for ch in range(cfg.channels):
        noise = rng.normal(0.0, cfg.noise_sigma, size=shape) if cfg.noise_sigma else 0.0
        tex = _texture(rng, shape, cfg.texture_amplitude) if ch > 0 else 0.0
        out[ch] = cfg.background + offset + tex + noise
    return out


def draw_target_coverage(rng: np.random.Generator, cfg: GenConfig) -> float:
    if rng.random() < cfg.clear_fraction:
        return float(rng.uniform(max(0.9, cfg.coverage_min), 1.0))
    return float(rng.uniform(cfg.coverage_min, 1.0))


def generate_tile(cfg: GenConfig, index: int) -> Tile:
    """Tile ``index`` of the dataset described by ``cfg``; independent of other tiles."""
    rng = generator(cfg.seed, "synth_tile", index)
    shape = (cfg.size, cfg.size)
    target = draw_target_coverage(rng, cfg)
    mask = grow_clouds(rng, shape, target, cfg.cloud_radius_max)
    cov = mask.sum() / mask.size
    label = int(rng.random() < plume_probability(cov, cfg.plume_rate, cfg.bias))
    pixels = _background(rng, cfg, shape)
    if label:
        if cfg.plume_centered:
            cy = cx = (cfg.size - 1) / 2.0
        else:
            vy, vx = np.nonzero(mask)
            j = rng.integers(vy.size)
            cy, cx = float(vy[j]), float(vx[j])
        pixels[0] += cfg.plume_amplitude * _gaussian_bump(shape, cy, cx, cfg.plume_width)
    pixels[:, ~mask] = cfg.placeholder
    lat = float(rng.uniform(-60.0, 70.0))
    lon = float(rng.uniform(-180.0, 180.0))
    return Tile(id=f"{cfg.id_prefix}{index:06d}", pixels=pixels.astype(np.float32), mask=mask,
                label=label, lat=lat, lon=lon)


def coverage_draws(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-tile (coverage, label uniform) without synthesizing pixels.

    Replays the first draws of :func:`generate_tile`, so tile i's label under
    any ``bias`` is ``u[i] < plume_probability(cov[i], plume_rate, bias)``.
    """
    cov = np.empty(cfg.n_tiles)
    u = np.empty(cfg.n_tiles)
    shape = (cfg.size, cfg.size)
    for i in range(cfg.n_tiles):
        rng = generator(cfg.seed, "synth_tile", i)
        mask = grow_clouds(rng, shape, draw_target_coverage(rng, cfg), cfg.cloud_radius_max)
        cov[i] = mask.sum() / mask.size
        u[i] = rng.random()
    return cov, u


def generate_dataset(cfg: GenConfig, split_tag: str = "train") -> Dataset:
    tiles = tuple(generate_tile(cfg, i) for i in range(cfg.n_tiles))
    return Dataset(tiles, cfg.channels, cfg.size, cfg.size, split_tag, {"generator": cfg.to_dict()})


# --- deployment scenes -----------------------------------------------------


@dataclass(frozen=True)
class PlumeSite:
    id: str
    lat: float
    lon: float


@dataclass(frozen=True, eq=False)
class Scene:
    """A large raster plus its geographic frame.

    Row 0 is the northern edge at ``lat_max``; column 0 the western edge at
    ``lon_min``. Each pixel spans ``deg_lat`` x ``deg_lon`` degrees.
    """

    raster: Tile
    lat_max: float
    lon_min: float
    deg_lat: float
    deg_lon: float
    plumes: tuple[PlumeSite, ...] = ()

    @property
    def height(self) -> int:
        return self.raster.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.raster.pixels.shape[2]

    def latlon(self, row: float, col: float) -> tuple[float, float]:
        """Geographic position of fractional pixel coordinates (edges at integers)."""
        return self.lat_max - row * self.deg_lat, self.lon_min + col * self.deg_lon

    def frame(self) -> dict:
        return {"lat_max": self.lat_max, "lon_min": self.lon_min,
                "deg_lat": self.deg_lat, "deg_lon": self.deg_lon}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return self.raster == other.raster and self.frame() == other.frame() and self.plumes == other.plumes

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SceneConfig:
    rows: int = 512
    cols: int = 512
    width_deg: float = 30.0
    height_deg: float = 30.0
    lat_max: float = 60.0
    lon_min: float = -10.0
    n_plumes: int = 150
    scene_coverage: float = 0.55
    cloud_radius_max: float = 40.0
    gen: GenConfig = field(default_factory=GenConfig)
    seed: int = 0
    scene_id: str = "scene"

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("scene dimensions must be positive")
        if self.width_deg <= 0 or self.height_deg <= 0:
            raise ValueError("scene extent must be positive")
        if self.lat_max > 90 or self.lat_max - self.height_deg < -90:
            raise ValueError("scene latitude extent leaves [-90, 90]")
        if self.lon_min < -180 or self.lon_min + self.width_deg > 180:
            raise ValueError("scene longitude extent leaves [-180, 180]")
        if self.n_plumes < 0 or not 0.0 <= self.scene_coverage <= 1.0:
            raise ValueError("n_plumes must be >= 0 and scene_coverage in [0, 1]")


def generate_scene(cfg: SceneConfig) -> Scene:
    g = cfg.gen
    rng = generator(cfg.seed, "scene", cfg.scene_id)
    shape = (cfg.rows, cfg.cols)
    mask = grow_clouds(rng, shape, cfg.scene_coverage, cfg.cloud_radius_max)
    pixels = np.empty((g.channels,) + shape)
    # background offset varies smoothly across the scene, like the per-tile jitter
    drift = _texture(rng, shape, g.tile_jitter * 2) if g.tile_jitter else 0.0
    for ch in range(g.channels):
        noise = rng.normal(0.0, g.noise_sigma, size=shape) if g.noise_sigma else 0.0
        tex = _texture(rng, shape, g.texture_amplitude) if ch > 0 else 0.0
        pixels[ch] = g.background + drift + tex + noise
    deg_lat, deg_lon = cfg.height_deg / cfg.rows, cfg.width_deg / cfg.cols
    plumes = []
    for k in range(cfg.n_plumes):
        r, c = float(rng.uniform(0, cfg.rows)), float(rng.uniform(0, cfg.cols))
        pixels[0] += g.plume_amplitude * _gaussian_bump(shape, r - 0.5, c - 0.5, g.plume_width)
        plumes.append(PlumeSite(f"{cfg.scene_id}_p{k:04d}", cfg.lat_max - r * deg_lat,
                                cfg.lon_min + c * deg_lon))
    pixels[:, ~mask] = g.placeholder
    centre_lat = cfg.lat_max - cfg.height_deg / 2
    centre_lon = cfg.lon_min + cfg.width_deg / 2
    raster = Tile(id=cfg.scene_id, pixels=pixels.astype(np.float32), mask=mask,
                  label=None, lat=centre_lat, lon=centre_lon)
    return Scene(raster, cfg.lat_max, cfg.lon_min, deg_lat, deg_lon, tuple(plumes))


def save_scene(scene: Scene, path: str | os.PathLike, attrs: dict | None = None) -> Path:
    r = scene.raster
    c, h, w = r.shape
    ds = Dataset((r,), c, h, w, "deploy", {"scene": scene.frame(), **(attrs or {})})
    root = save_dataset(ds, path)
    with open(root / GROUND_TRUTH_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "lat", "lon"])
        for p in scene.plumes:
            writer.writerow([p.id, repr(p.lat), repr(p.lon)])
    return root


def load_scene(path: str | os.PathLike) -> Scene:
    root = Path(path)
    ds = load_dataset(root)
    if len(ds) != 1 or "scene" not in ds.attrs:
        raise ValueError(f"{root} is not a scene dataset")
    f = ds.attrs["scene"]
    plumes = []
    gt = root / GROUND_TRUTH_NAME
    if gt.exists():
        with open(gt, newline="") as fh:
            for row in csv.DictReader(fh):
                plumes.append(PlumeSite(row["id"], float(row["lat"]), float(row["lon"])))
    return Scene(ds.tiles[0], f["lat_max"], f["lon_min"], f["deg_lat"], f["deg_lon"], tuple(plumes))

