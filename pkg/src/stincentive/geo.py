"""Hexagonal grids, time slots and CMAC-style tile activation.

Space is projected onto a local plane centred on the city bounding box and
tiled with flat-top hexagons in axial coordinates.  Several hexagon sizes
(levels) are stacked for hierarchical coarse coding; each level carries a
few tilings shifted by seeded offsets.  Every spatial tiling is crossed
with coarse time windows, and each (tiling, window) pair hashes into one
row of a fixed-size embedding table.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

EARTH_RADIUS_M = 6371008.8
SLOTS_PER_DAY = 48
SLOT_MINUTES = 30
DAY_KINDS = ("weekday", "weekend")

_SQRT3 = math.sqrt(3.0)
_AXIAL_OFFSET = 1 << 20
_LEVEL_SHIFT = 42
_ROOT_LEVEL = 63


class OutOfBoundsError(ValueError):
    """A coordinate fell outside the configured bounding box."""


def day_kind_of(day: int) -> str:
    """Day kind of day ``day`` of a log whose day 0 is a Monday."""
    return "weekend" if day % 7 >= 5 else "weekday"


def day_kind_code(day_kind: str) -> int:
    try:
        return DAY_KINDS.index(day_kind)
    except ValueError:
        raise ValueError(f"unknown day kind {day_kind!r}") from None


@dataclass(frozen=True)
class GridCell:
    cell_id: int
    center: tuple[float, float]
    resolution_level: int


@dataclass(frozen=True)
class TimeSlot:
    index: int
    day_kind: str = "weekday"

    def __post_init__(self):
        if not 0 <= self.index < SLOTS_PER_DAY:
            raise ValueError(f"slot index {self.index} outside [0, {SLOTS_PER_DAY})")
        day_kind_code(self.day_kind)

    @classmethod
    def from_minutes(cls, minutes: float, day_kind: str = "weekday") -> "TimeSlot":
        return cls(int(minutes // SLOT_MINUTES) % SLOTS_PER_DAY, day_kind)


@dataclass(frozen=True)
class TileSet:
    tile_ids: tuple[int, ...]
    num_tilings: int

    def __post_init__(self):
        if len(self.tile_ids) != self.num_tilings:
            raise ValueError("one tile id per tiling expected")


@dataclass
class CodingConfig:
    """Tile-coding layout.

    ``bbox`` is ``(lat_min, lat_max, lon_min, lon_max)`` in degrees.  Hex
    resolutions are edge lengths in metres, finest first.  Time windows are
    ``time_window_minutes`` times each entry of ``time_window_multiples``.
    With ``root_tiling`` every level is topped by one tile covering the
    whole box, so two states in the same time window always share a tile.
    """

    bbox: tuple[float, float, float, float] = (39.80, 40.02, 116.25, 116.55)
    hex_resolutions: tuple[float, ...] = (300.0, 900.0, 2700.0)
    num_tilings_per_resolution: int = 2
    time_window_minutes: int = 30
    time_window_multiples: tuple[int, ...] = (1, 2)
    hash_table_size: int = 1 << 18
    embedding_dim: int = 16
    root_tiling: bool = True
    seed: int = 7

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        self.hex_resolutions = tuple(float(v) for v in self.hex_resolutions)
        self.time_window_multiples = tuple(int(v) for v in self.time_window_multiples)
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ValueError("degenerate bounding box")
        if not self.hex_resolutions or any(r <= 0 for r in self.hex_resolutions):
            raise ValueError("hex resolutions must be positive")
        if any(b <= a for a, b in zip(self.hex_resolutions, self.hex_resolutions[1:])):
            raise ValueError("hex resolutions must be strictly increasing")
        if self.num_tilings_per_resolution < 1:
            raise ValueError("need at least one tiling per resolution")
        if self.hash_table_size <= 0:
            raise ValueError("hash_table_size must be positive")
        if self.time_window_minutes <= 0 or not self.time_window_multiples:
            raise ValueError("bad time window configuration")
        if any(m <= 0 for m in self.time_window_multiples):
            raise ValueError("time window multiples must be positive")

    @property
    def num_spatial_tilings(self) -> int:
        return len(self.hex_resolutions) * self.num_tilings_per_resolution + int(self.root_tiling)

    @property
    def num_tilings(self) -> int:
        return self.num_spatial_tilings * len(self.time_window_multiples)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("bbox", "hex_resolutions", "time_window_multiples"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodingConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown coding config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CodingConfig":
        return cls.from_dict(json.loads(text))


def hex_round(qf, rf):
    """Round fractional axial coordinates to the containing hexagon."""
    qf = np.asarray(qf, dtype=float)
    rf = np.asarray(rf, dtype=float)
    sf = -qf - rf
    q = np.rint(qf)
    r = np.rint(rf)
    s = np.rint(sf)
    dq = np.abs(q - qf)
    dr = np.abs(r - rf)
    ds = np.abs(s - sf)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


def pixel_to_axial(x, y, size: float):
    qf = (2.0 / 3.0) * np.asarray(x, dtype=float) / size
    rf = (-np.asarray(x, dtype=float) / 3.0 + _SQRT3 / 3.0 * np.asarray(y, dtype=float)) / size
    return hex_round(qf, rf)


def axial_to_pixel(q, r, size: float):
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    return size * 1.5 * q, size * _SQRT3 * (r + q / 2.0)


def hex_distance(q1, r1, q2, r2):
    dq = np.asarray(q1) - np.asarray(q2)
    dr = np.asarray(r1) - np.asarray(r2)
    return (np.abs(dq) + np.abs(dr) + np.abs(dq + dr)) // 2


def encode_cell(level: int, q, r):
    q = np.asarray(q, dtype=np.int64)
    r = np.asarray(r, dtype=np.int64)
    return (np.int64(level) << _LEVEL_SHIFT) | ((q + _AXIAL_OFFSET) << 21) | (r + _AXIAL_OFFSET)


def decode_cell(cell_id: int) -> tuple[int, int, int]:
    cell_id = int(cell_id)
    level = cell_id >> _LEVEL_SHIFT
    q = ((cell_id >> 21) & ((1 << 21) - 1)) - _AXIAL_OFFSET
    r = (cell_id & ((1 << 21) - 1)) - _AXIAL_OFFSET
    return level, q, r


_U64 = np.uint64


def _mix64(z):
    # splitmix64 finaliser; uint64 arithmetic wraps
    z = z + _U64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def hash_keys(seed: int, *parts) -> np.ndarray:
    """Deterministic 64-bit hash of integer key columns."""
    with np.errstate(over="ignore"):
        h = _mix64(np.asarray(seed, dtype=np.int64).astype(_U64))
        for p in parts:
            h = _mix64(h ^ np.asarray(p, dtype=np.int64).astype(_U64))
    return h


@dataclass
class HexGrid:
    """Planar hexagon index over a bounding box."""

    cfg: CodingConfig
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lat_min, lat_max, lon_min, lon_max = self.cfg.bbox
        self.lat0 = 0.5 * (lat_min + lat_max)
        self.lon0 = 0.5 * (lon_min + lon_max)
        self._kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(self.lat0))
        self._ky = math.radians(1.0) * EARTH_RADIUS_M
        rng = np.random.default_rng([self.cfg.seed, 0x7115])
        n_levels = len(self.cfg.hex_resolutions)
        k = self.cfg.num_tilings_per_resolution
        offsets = np.zeros((n_levels, k, 2))
        for lvl, size in enumerate(self.cfg.hex_resolutions):
            # tiling 0 is the reference grid used by locate()
            offsets[lvl, 1:] = rng.uniform(-size, size, size=(k - 1, 2))
        self._offsets = offsets

    @property
    def levels(self) -> int:
        return len(self.cfg.hex_resolutions)

    def project(self, lat, lon):
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        return (lon - self.lon0) * self._kx, (lat - self.lat0) * self._ky

    def unproject(self, x, y):
        return self.lat0 + np.asarray(y) / self._ky, self.lon0 + np.asarray(x) / self._kx

    def in_bounds(self, lat, lon) -> np.ndarray:
        lat_min, lat_max, lon_min, lon_max = self.cfg.bbox
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        return (lat >= lat_min) & (lat <= lat_max) & (lon >= lon_min) & (lon <= lon_max)

    def _check_bounds(self, lat, lon):
        ok = self.in_bounds(lat, lon)
        if not np.all(ok):
            raise OutOfBoundsError(f"{int(np.size(ok) - np.count_nonzero(ok))} point(s) outside {self.cfg.bbox}")

    def _check_level(self, level: int):
        if not 0 <= level < self.levels:
            raise ValueError(f"level {level} outside [0, {self.levels})")

    def axial(self, lat, lon, level: int, tiling: int = 0):
        self._check_level(level)
        x, y = self.project(lat, lon)
        ox, oy = self._offsets[level, tiling]
        return pixel_to_axial(x + ox, y + oy, self.cfg.hex_resolutions[level])

    def cell_ids(self, lat, lon, level: int) -> np.ndarray:
        self._check_bounds(lat, lon)
        q, r = self.axial(lat, lon, level)
        return encode_cell(level, q, r)

    def cell_center(self, cell_id: int) -> tuple[float, float]:
        level, q, r = decode_cell(cell_id)
        x, y = axial_to_pixel(q, r, self.cfg.hex_resolutions[level])
        lat, lon = self.unproject(x, y)
        return float(lat), float(lon)

    def locate(self, lat: float, lon: float, level: int) -> GridCell:
        self._check_level(level)
        cid = int(self.cell_ids(lat, lon, level))
        return GridCell(cid, self.cell_center(cid), level)

    def cells_in_box(self, level: int) -> np.ndarray:
        """All reference-tiling cells whose hexagon meets the box (by dense sampling)."""
        size = self.cfg.hex_resolutions[level]
        lat_min, lat_max, lon_min, lon_max = self.cfg.bbox
        step = size / 4.0
        x0, y0 = self.project(lat_min, lon_min)
        x1, y1 = self.project(lat_max, lon_max)
        xs = np.arange(float(x0), float(x1) + step, step)
        ys = np.arange(float(y0), float(y1) + step, step)
        gx, gy = np.meshgrid(np.clip(xs, x0, x1), np.clip(ys, y0, y1))
        q, r = pixel_to_axial(gx.ravel(), gy.ravel(), size)
        return np.unique(encode_cell(level, q, r))

    def tile_matrix(self, lat, lon, minutes, day_kind) -> np.ndarray:
        """Tile ids for many states; shape ``(n, num_tilings)``.

        ``minutes`` counts minutes since midnight; ``day_kind`` holds the
        integer codes from :data:`DAY_KINDS`.
        """
        cfg = self.cfg
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        minutes = np.atleast_1d(np.asarray(minutes, dtype=float))
        day_kind = np.atleast_1d(np.asarray(day_kind, dtype=np.int64))
        self._check_bounds(lat, lon)
        n = lat.shape[0]
        x, y = self.project(lat, lon)

        spatial = []
        for lvl, size in enumerate(cfg.hex_resolutions):
            for t in range(cfg.num_tilings_per_resolution):
                ox, oy = self._offsets[lvl, t]
                q, r = pixel_to_axial(x + ox, y + oy, size)
                spatial.append((lvl * 16 + t, q, r))
        if cfg.root_tiling:
            zeros = np.zeros(n, dtype=np.int64)
            spatial.append((_ROOT_LEVEL, zeros, zeros))

        out = np.empty((n, cfg.num_tilings), dtype=np.int64)
        col = 0
        for mult in cfg.time_window_multiples:
            window = np.floor(minutes / (cfg.time_window_minutes * mult)).astype(np.int64)
            for tiling_key, q, r in spatial:
                h = hash_keys(cfg.seed, tiling_key, mult, q, r, window, day_kind)
                out[:, col] = (h % _U64(cfg.hash_table_size)).astype(np.int64)
                col += 1
        return out


@dataclass(frozen=True)
class SpatioTemporalState:
    """An MDP state: location, time slot and context features."""

    lat: float
    lon: float
    slot: TimeSlot
    context: tuple[float, ...] = ()
    minutes: float | None = None

    @property
    def minute_of_day(self) -> float:
        if self.minutes is not None:
            return self.minutes
        return float(self.slot.index * SLOT_MINUTES)


def activate_tiles(state: SpatioTemporalState, cfg: CodingConfig, grid: HexGrid | None = None) -> TileSet:
    grid = grid or HexGrid(cfg)
    ids = grid.tile_matrix(state.lat, state.lon, state.minute_of_day, day_kind_code(state.slot.day_kind))[0]
    return TileSet(tuple(int(i) for i in ids), cfg.num_tilings)


def embed(tiles: TileSet | Sequence[int], table: np.ndarray) -> np.ndarray:
    """Sum of the embedding rows selected by the active tiles."""
    ids = np.asarray(tiles.tile_ids if isinstance(tiles, TileSet) else tiles, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("tile id outside embedding table")
    return table[ids].sum(axis=0)
