"""Polar grid geometry shared by every other module.

Grids are ``(num_azimuths, num_range_bins)`` float32 arrays, azimuth outer.
Azimuth is measured counter-clockwise from the sensor +x axis; bins are
half-open so values on a boundary fall into the lower-indexed bin.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

SENTINEL = -1.0


@dataclass(frozen=True)
class PolarGridSpec:
    num_azimuths: int = 400
    num_range_bins: int = 471
    range_resolution: float = 0.35
    azimuth_span: float = 360.0
    height_min: float = -2.2
    height_max: float = 5.2
    sensor_height: float = 1.97
    elevation_fov: tuple[float, float] = (-40.0, 1.8)

    def __post_init__(self):
        if self.num_azimuths < 1 or self.num_range_bins < 1:
            raise ValueError("grid needs at least one azimuth and one range bin")
        if not self.range_resolution > 0:
            raise ValueError("range_resolution must be positive")
        if not self.height_min < self.height_max:
            raise ValueError("height_min must be below height_max")
        if not 0 < self.azimuth_span <= 360:
            raise ValueError("azimuth_span must be in (0, 360]")
        lo, hi = self.elevation_fov
        if not lo < hi:
            raise ValueError("elevation_fov must be (lower, upper) with lower < upper")
        object.__setattr__(self, "elevation_fov", (float(lo), float(hi)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_azimuths, self.num_range_bins)

    @property
    def azimuth_step(self) -> float:
        """Width of one azimuth bin in degrees."""
        return self.azimuth_span / self.num_azimuths

    @property
    def max_range(self) -> float:
        return self.num_range_bins * self.range_resolution

    @property
    def num_cells(self) -> int:
        return self.num_azimuths * self.num_range_bins

    def to_dict(self) -> dict:
        d = asdict(self)
        d["elevation_fov"] = list(self.elevation_fov)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolarGridSpec":
        d = dict(d)
        if "elevation_fov" in d:
            d["elevation_fov"] = tuple(d["elevation_fov"])
        return cls(**d)


def _check_grid(values: np.ndarray, grid: PolarGridSpec, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    if values.shape != grid.shape:
        raise ValueError(f"{what} has shape {values.shape}, grid expects {grid.shape}")
    return values


def _check_unit_range(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")
    if values.size and (values.min() < -1.0 or values.max() > 1.0):
        raise ValueError(f"{what} must lie within [-1, 1]")


@dataclass
class RadarFrame:
    """Polar radar power grid, scaled to [-1, 1]."""

    power: np.ndarray
    grid: PolarGridSpec = field(default_factory=PolarGridSpec)

    def __post_init__(self):
        self.power = _check_grid(self.power, self.grid, "radar power")
        _check_unit_range(self.power, "radar power")


@dataclass
class ElevationMap:
    """Dense polar height map, scaled to [-1, 1]."""

    heights: np.ndarray
    grid: PolarGridSpec = field(default_factory=PolarGridSpec)

    def __post_init__(self):
        self.heights = _check_grid(self.heights, self.grid, "elevation")
        _check_unit_range(self.heights, "elevation")


@dataclass
class PartialElevationMap:
    """Masked height map; unobserved cells hold the -1 sentinel."""

    heights: np.ndarray
    mask: np.ndarray
    grid: PolarGridSpec = field(default_factory=PolarGridSpec)

    def __post_init__(self):
        self.heights = _check_grid(self.heights, self.grid, "partial elevation")
        self.mask = _check_grid(self.mask, self.grid, "mask")
        _check_unit_range(self.heights, "partial elevation")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask values must be 0 or 1")
        if np.any(self.heights[self.mask == 0] != SENTINEL):
            raise ValueError("unmasked cells must carry the -1 sentinel")

    @classmethod
    def empty(cls, grid: PolarGridSpec) -> "PartialElevationMap":
        return cls(np.full(grid.shape, SENTINEL, np.float32), np.zeros(grid.shape, np.float32), grid)


@dataclass
class PointCloud:
    """Points in the sensor frame: sensor at the origin, z up, meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must have shape (N, 3)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return len(self.points)


def scale_height(h, spec: PolarGridSpec):
    """Map heights in meters onto [-1, 1]; out-of-interval values are clamped."""
    h_arr = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h_arr)):
        raise ValueError("height must be finite")
    h_arr = np.clip(h_arr, spec.height_min, spec.height_max)
    s = 2.0 * (h_arr - spec.height_min) / (spec.height_max - spec.height_min) - 1.0
    return float(s) if np.ndim(s) == 0 else s


def unscale_height(s, spec: PolarGridSpec):
    """Inverse of :func:`scale_height` on [-1, 1]."""
    s_arr = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s_arr)) or np.any(s_arr < -1.0) or np.any(s_arr > 1.0):
        raise ValueError("scaled height must lie within [-1, 1]")
    h = spec.height_min + (s_arr + 1.0) * 0.5 * (spec.height_max - spec.height_min)
    return float(h) if np.ndim(h) == 0 else h


def polar_bins(x, y, spec: PolarGridSpec):
    """Cell indices for planar sensor-frame coordinates.

    Returns ``(azimuth_idx, range_idx, valid)``; ``valid`` is False for points
    at or beyond the maximum range or outside the azimuth span.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rho = np.hypot(x, y)
    phi = np.degrees(np.arctan2(y, x)) % 360.0
    # arctan2 can return -0.0 -> 360.0 after the modulo
    phi = np.where(phi >= 360.0, 0.0, phi)
    ai = np.floor(phi / spec.azimuth_step).astype(np.int64)
    ri = np.floor(rho / spec.range_resolution).astype(np.int64)
    valid = (ri < spec.num_range_bins) & (phi < spec.azimuth_span)
    ai = np.where(valid, ai % spec.num_azimuths, 0)
    ri = np.where(valid, ri, 0)
    return ai, ri, valid


def bin_pointcloud(cloud: PointCloud, spec: PolarGridSpec) -> PartialElevationMap:
    """Rasterize a sensor-frame point cloud into a max-height polar map."""
    pts = cloud.points
    out = PartialElevationMap.empty(spec)
    if len(pts) == 0:
        return out
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    elev = np.degrees(np.arctan2(z, np.hypot(x, y)))
    lo, hi = spec.elevation_fov
    ai, ri, valid = polar_bins(x, y, spec)
    keep = valid & (elev >= lo) & (elev <= hi)
    if not np.any(keep):
        return out
    flat = ai[keep] * spec.num_range_bins + ri[keep]
    ground_z = z[keep] + spec.sensor_height
    best = np.full(spec.num_cells, -np.inf)
    np.maximum.at(best, flat, ground_z)
    hit = np.isfinite(best)
    heights = np.full(spec.num_cells, SENTINEL, dtype=np.float64)
    heights[hit] = scale_height(best[hit], spec)
    out.heights = heights.reshape(spec.shape).astype(np.float32)
    out.mask = hit.reshape(spec.shape).astype(np.float32)
    return out


def cartesian_raster(frame: Union[RadarFrame, ElevationMap, np.ndarray], pixels_per_meter: float,
                     grid: PolarGridSpec | None = None) -> np.ndarray:
    """Resample a polar grid onto a square image centred on the sensor.

    Row 0 is the +y edge, column 0 the -x edge. Pixels outside the maximum
    range (or the azimuth span) are set to -1.
    """
    if not pixels_per_meter > 0:
        raise ValueError("pixels_per_meter must be positive")
    if isinstance(frame, RadarFrame):
        values, grid = frame.power, frame.grid
    elif isinstance(frame, ElevationMap):
        values, grid = frame.heights, frame.grid
    else:
        if grid is None:
            raise ValueError("a bare array needs an explicit grid")
        values = _check_grid(frame, grid, "frame")
    width = math.ceil(2 * grid.max_range * pixels_per_meter)
    centers = (np.arange(width) + 0.5 - width / 2) / pixels_per_meter
    px, py = np.meshgrid(centers, -centers)
    ai, ri, valid = polar_bins(px, py, grid)
    image = np.full((width, width), SENTINEL, dtype=np.float32)
    image[valid] = values[ai[valid], ri[valid]]
    return image


def write_grid(path: Union[str, Path], values: np.ndarray) -> None:
    """Write a grid as headerless little-endian float32, azimuth-major."""
    np.ascontiguousarray(values, dtype="<f4").tofile(str(path))


def read_grid(path: Union[str, Path], spec: PolarGridSpec) -> np.ndarray:
    data = np.fromfile(str(path), dtype="<f4")
    if data.size != spec.num_cells:
        raise ValueError(f"{path}: expected {spec.num_cells} float32 values, found {data.size}")
    return data.reshape(spec.shape).astype(np.float32)
