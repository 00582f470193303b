"""Procedural worlds, an oracle radar and a lidar-like partial sensor.

The oracle radar is a declared stand-in for a physical sensor: a fixed,
seedable stochastic forward model whose parameters live in
:mod:`radarsim.profiles`. Nothing here claims to be radar physics.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .polargrid import (
    ElevationMap,
    PartialElevationMap,
    PointCloud,
    PolarGridSpec,
    RadarFrame,
    bin_pointcloud,
    polar_bins,
    read_grid,
    scale_height,
    unscale_height,
    write_grid,
)

logger = logging.getLogger(__name__)

SPLITS = ("R-train", "R-test", "S-train", "S-test")
PAPER_SPLIT_COUNTS = {"R-train": 222420, "R-test": 23460, "S-train": 100000, "S-test": 68400}
FILE_ROLES = ("radar", "elevation", "elevation_mask", "partial")


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned-in-its-own-frame footprint with a flat top.

    ``kind`` is ``box`` / ``wall`` (rectangle ``length`` x ``width`` rotated by
    ``yaw`` degrees) or ``cylinder`` (disc of radius ``length / 2``).
    ``height`` is measured above the scene ground level.
    """

    kind: str
    center: tuple[float, float]
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def footprint_samples(self, spacing: float) -> np.ndarray:
        half_l, half_w = self.length / 2, self.width / 2
        nu = max(2, int(math.ceil(self.length / spacing)) + 1)
        nv = max(2, int(math.ceil(self.width / spacing)) + 1)
        u, v = np.meshgrid(np.linspace(-half_l, half_l, nu), np.linspace(-half_w, half_w, nv))
        u, v = u.ravel(), v.ravel()
        if self.kind == "cylinder":
            keep = u**2 + v**2 <= half_l**2 + 1e-12
            u, v = u[keep], v[keep]
        elif self.kind not in ("box", "wall"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        c, s = math.cos(math.radians(self.yaw)), math.sin(math.radians(self.yaw))
        x = self.center[0] + c * u - s * v
        y = self.center[1] + s * u + c * v
        return np.stack([x, y], axis=1)


@dataclass
class SceneParams:
    ground_height: float = 0.0
    ground_jitter: float = 0.0
    obstacle_count_range: tuple[int, int] = (4, 10)
    kind_weights: dict = field(default_factory=lambda: {"box": 0.5, "cylinder": 0.25, "wall": 0.25})
    box_length: tuple[float, float] = (3.0, 5.0)
    box_width: tuple[float, float] = (1.6, 2.2)
    box_height: tuple[float, float] = (1.3, 2.2)
    cylinder_radius: tuple[float, float] = (0.2, 0.5)
    cylinder_height: tuple[float, float] = (2.0, 4.0)
    wall_length: tuple[float, float] = (4.0, 10.0)
    wall_thickness: tuple[float, float] = (0.3, 0.6)
    wall_height: tuple[float, float] = (1.0, 3.0)
    min_distance: float = 3.0
    rng_seed: int = 0

    def validate(self, spec: PolarGridSpec):
        lo, hi = self.obstacle_count_range
        if not 0 <= lo <= hi:
            raise ValueError("obstacle_count_range must be a non-empty (min, max) pair")
        for name in ("box_length", "box_width", "box_height", "cylinder_radius", "cylinder_height",
                     "wall_length", "wall_thickness", "wall_height"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ValueError(f"{name} must be a non-empty positive range")
        if self.ground_jitter < 0:
            raise ValueError("ground_jitter must be non-negative")
        top = self.ground_height + self.ground_jitter + max(self.box_height[1], self.cylinder_height[1],
                                                            self.wall_height[1])
        if self.ground_height - self.ground_jitter < spec.height_min or top > spec.height_max:
            raise ValueError("scene heights must stay within the grid's height interval")
        if not self.kind_weights or any(w < 0 for w in self.kind_weights.values()):
            raise ValueError("kind_weights must be non-negative")


@dataclass
class OracleSensorParams:
    noise_floor_mean: float = -0.8
    noise_floor_std: float = 0.05
    # mild gain, occlusion and speckle keep the radar informative enough to learn at desk scale
    return_gain: float = 0.45
    range_attenuation: float = 0.1
    speckle_std: float = 0.15
    occlusion_opacity: float = 0.15
    # cells rising less than this above ground_level neither occlude nor count as obstacles
    occluder_min_height: float = 0.3
    ground_level: float = 0.0

    def validate(self):
        if self.noise_floor_std < 0 or self.speckle_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0.0 <= self.occlusion_opacity <= 1.0:
            raise ValueError("occlusion_opacity must lie in [0, 1]")


@dataclass
class LidarSimParams:
    beam_elevations: tuple[float, ...] = tuple(np.linspace(-30.0, -1.0, 8).round(6).tolist())
    max_range: float = 50.0
    azimuth_step: Optional[float] = None  # defaults to the grid's azimuth bin width
    dropout_prob: float = 0.1

    def validate(self, spec: PolarGridSpec):
        if self.max_range > spec.max_range + 1e-9:
            raise ValueError("lidar max_range exceeds the grid's range")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if self.azimuth_step is not None and not self.azimuth_step > 0:
            raise ValueError("azimuth_step must be positive")
        if len(self.beam_elevations) == 0:
            raise ValueError("at least one beam is required")


def _uniform(rng, bounds):
    return float(rng.uniform(bounds[0], bounds[1]))


def sample_obstacles(params: SceneParams, spec: PolarGridSpec, rng: np.random.Generator) -> list[Obstacle]:
    lo, hi = params.obstacle_count_range
    count = int(rng.integers(lo, hi + 1))
    kinds = sorted(params.kind_weights)
    probs = np.array([params.kind_weights[k] for k in kinds], dtype=float)
    probs = probs / probs.sum()
    obstacles = []
    for _ in range(count):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        for _attempt in range(100):
            dist = _uniform(rng, (params.min_distance, spec.max_range * 0.95))
            bearing = _uniform(rng, (0.0, math.radians(spec.azimuth_span)))
            yaw = _uniform(rng, (0.0, 180.0))
            center = (dist * math.cos(bearing), dist * math.sin(bearing))
            if kind == "box":
                length, width = _uniform(rng, params.box_length), _uniform(rng, params.box_width)
                height = _uniform(rng, params.box_height)
            elif kind == "cylinder":
                length = width = 2 * _uniform(rng, params.cylinder_radius)
                height = _uniform(rng, params.cylinder_height)
            else:
                length, width = _uniform(rng, params.wall_length), _uniform(rng, params.wall_thickness)
                height = _uniform(rng, params.wall_height)
            ob = Obstacle(kind, center, length, width, height, yaw)
            # keep the whole footprint clear of the sensor
            if np.hypot(*ob.footprint_samples(0.25).T).min() >= params.min_distance:
                obstacles.append(ob)
                break
    return obstacles


def render_scene(obstacles, ground_height: float, spec: PolarGridSpec) -> ElevationMap:
    """Rasterize obstacle footprints; a cell takes the tallest footprint touching it."""
    best = np.full(spec.num_cells, ground_height, dtype=np.float64)
    for ob in obstacles:
        nearest = max(math.hypot(*ob.center) - max(ob.length, ob.width), spec.range_resolution)
        arc = nearest * math.radians(spec.azimuth_step)
        spacing = min(spec.range_resolution, arc) / 3.0
        pts = ob.footprint_samples(spacing)
        ai, ri, valid = polar_bins(pts[:, 0], pts[:, 1], spec)
        flat = ai[valid] * spec.num_range_bins + ri[valid]
        np.maximum.at(best, flat, ground_height + ob.height)
    heights = scale_height(best, spec).reshape(spec.shape)
    return ElevationMap(heights.astype(np.float32), spec)


def scene_ground_height(params: SceneParams, seed: int) -> float:
    """Ground level drawn for a scene; jitter is uniform in +-ground_jitter."""
    if params.ground_jitter == 0:
        return params.ground_height
    rng = np.random.default_rng([seed, 7])
    return params.ground_height + float(rng.uniform(-params.ground_jitter, params.ground_jitter))


def generate_scene(params: SceneParams, spec: PolarGridSpec) -> ElevationMap:
    params.validate(spec)
    rng = np.random.default_rng(params.rng_seed)
    obstacles = sample_obstacles(params, spec, rng)
    return render_scene(obstacles, scene_ground_height(params, params.rng_seed), spec)


def _is_dense(w) -> bool:
    return isinstance(w, ElevationMap)


def oracle_radar(w: ElevationMap, params: OracleSensorParams, seed: int) -> RadarFrame:
    """Sample one stochastic radar frame for a dense elevation map.

    Along each azimuth ray, a cell returns power proportional to its height
    above ``ground_level``, attenuated with range bin index and reduced by
    ``occlusion_opacity`` for every obstacle cell crossed before it.
    """
    if not _is_dense(w):
        raise TypeError("oracle_radar needs a dense ElevationMap")
    params.validate()
    spec = w.grid
    rng = np.random.default_rng(seed)
    h = unscale_height(w.heights.astype(np.float64), spec)
    visible = np.maximum(h - params.ground_level, 0.0)
    occluder = visible > params.occluder_min_height
    crossed = np.cumsum(occluder, axis=1) - occluder
    visibility = (1.0 - params.occlusion_opacity) ** crossed
    j = np.arange(spec.num_range_bins, dtype=np.float64)
    attenuation = (1.0 / (1.0 + j)) ** params.range_attenuation
    speckle = np.maximum(1.0 + params.speckle_std * rng.standard_normal(spec.shape), 0.0)
    noise = params.noise_floor_mean + params.noise_floor_std * rng.standard_normal(spec.shape)
    power = noise + params.return_gain * visible * attenuation[None, :] * speckle * visibility
    return RadarFrame(np.clip(power, -1.0, 1.0).astype(np.float32), spec)


def lidar_hits(w: ElevationMap, params: LidarSimParams, spec: PolarGridSpec) -> np.ndarray:
    """First-surface intersections of every beam, as sensor-frame points.

    The height field is piecewise constant per cell. A beam hits cell ``j``
    when its lowest height inside the cell is at or below the cell surface;
    the hit point lies on the beam (front face or top surface).
    """
    h = unscale_height(w.heights.astype(np.float64), spec)
    step = params.azimuth_step or spec.azimuth_step
    n_az = int(math.floor(spec.azimuth_span / step + 1e-9))
    az = (np.arange(n_az) + 0.5) * step
    a_idx = np.floor(az / spec.azimuth_step).astype(np.int64) % spec.num_azimuths
    res = spec.range_resolution
    r_in = np.arange(spec.num_range_bins) * res
    r_out = np.minimum(r_in + res, params.max_range)
    points = []
    for elev in params.beam_elevations:
        t = math.tan(math.radians(elev))
        z_in = spec.sensor_height + r_in * t
        z_out = spec.sensor_height + r_out * t
        z_low = np.minimum(z_in, z_out)
        surf = h[a_idx]  # (n_az, R)
        in_range = r_in < params.max_range
        hit = (z_low[None, :] <= surf) & in_range[None, :]
        any_hit = hit.any(axis=1)
        j = np.argmax(hit, axis=1)
        rows = np.nonzero(any_hit)[0]
        if rows.size == 0:
            continue
        jj = j[rows]
        s = surf[rows, jj]
        front = z_in[jj] <= s
        with np.errstate(divide="ignore", invalid="ignore"):
            r_top = np.where(t != 0, (s - spec.sensor_height) / t, r_in[jj])
        rho = np.where(front, r_in[jj], r_top)
        keep = rho <= params.max_range
        rows, jj, rho = rows[keep], jj[keep], rho[keep]
        # nudge inside the cell so floor(rho / res) == jj despite rounding
        rho = np.clip(rho, (jj + 1e-6) * res, (jj + 1 - 1e-6) * res)
        z = rho * t
        phi = np.radians(az[rows])
        points.append(np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1))
    if not points:
        return np.zeros((0, 3))
    return np.concatenate(points)


def simulate_lidar(w: ElevationMap, params: LidarSimParams, spec: PolarGridSpec, seed: int) -> PartialElevationMap:
    if not _is_dense(w):
        raise TypeError("simulate_lidar needs a dense ElevationMap")
    params.validate(spec)
    pts = lidar_hits(w, params, spec)
    rng = np.random.default_rng(seed)
    if len(pts) and params.dropout_prob > 0:
        pts = pts[rng.random(len(pts)) >= params.dropout_prob]
    return bin_pointcloud(PointCloud(pts), spec)


@dataclass
class ManifestEntry:
    id: str
    split: str
    seed: int
    files: dict
    ground_height: float = 0.0


@dataclass
class DatasetManifest:
    grid: PolarGridSpec
    entries: list
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def path(self, entry: ManifestEntry, role: str) -> Path:
        return self.root / entry.files[role]

    def load(self, entry: ManifestEntry, role: str) -> np.ndarray:
        return read_grid(self.path(entry, role), self.grid)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "meta": self.meta,
            "entries": [asdict(e) for e in self.entries],
        }

    def validate(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")
        size = self.grid.num_cells * 4
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"{e.id}: unknown split {e.split!r}")
            for role, rel in e.files.items():
                p = self.root / rel
                if not p.is_file() or p.stat().st_size != size:
                    raise ValueError(f"{e.id}: {role} file {p} missing or wrong size")

    @classmethod
    def load_json(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        entries = [ManifestEntry(**e) for e in d["entries"]]
        m = cls(PolarGridSpec.from_dict(d["grid"]), entries, path.parent, d.get("meta", {}))
        return m


def _split_seeds(seed: int, stream: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([seed, stream])
    return [int(s.generate_state(1, np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(n)]


def build_datasets(counts: dict, scene: SceneParams, sensor: OracleSensorParams, lidar: LidarSimParams,
                   spec: PolarGridSpec, out_dir, seed: int = 0, r_ground_jitter: float = 0.2) -> DatasetManifest:
    """Generate the four splits and write ``manifest.json`` into ``out_dir``.

    R scenes (aligned radar + partial lidar) and S scenes (dense elevation
    only) come from disjoint seed streams, so they are unaligned by
    construction. The manifest is written last and atomically.
    """
    out_dir = Path(out_dir)
    unknown = set(counts) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown splits {sorted(unknown)}")
    scene.validate(spec)
    sensor.validate()
    lidar.validate(spec)
    frames = out_dir / "frames"
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    frames.mkdir(parents=True, exist_ok=True)

    r_total = counts.get("R-train", 0) + counts.get("R-test", 0)
    s_total = counts.get("S-train", 0) + counts.get("S-test", 0)
    r_seeds = iter(_split_seeds(seed, 0, r_total))
    s_seeds = iter(_split_seeds(seed, 1, s_total))
    entries = []
    try:
        for split in SPLITS:
            real = split.startswith("R")
            for k in range(counts.get(split, 0)):
                scene_seed = next(r_seeds if real else s_seeds)
                params = SceneParams(**{**asdict(scene), "rng_seed": scene_seed,
                                        "ground_jitter": r_ground_jitter if real else scene.ground_jitter})
                w = generate_scene(params, spec)
                ground = scene_ground_height(params, scene_seed)
                eid = f"{split}-{k:06d}"
                files = {"elevation": f"frames/{eid}_elevation.f32"}
                write_grid(out_dir / files["elevation"], w.heights)
                if real:
                    x = oracle_radar(w, replace(sensor, ground_level=ground), seed=scene_seed ^ 0x5A5A)
                    y = simulate_lidar(w, lidar, spec, seed=scene_seed ^ 0xA5A5)
                    files["radar"] = f"frames/{eid}_radar.f32"
                    files["partial"] = f"frames/{eid}_partial.f32"
                    files["elevation_mask"] = f"frames/{eid}_elevation_mask.f32"
                    write_grid(out_dir / files["radar"], x.power)
                    write_grid(out_dir / files["partial"], y.heights)
                    write_grid(out_dir / files["elevation_mask"], y.mask)
                entries.append(ManifestEntry(eid, split, scene_seed, files, ground))
        r_ids = {e.seed for e in entries if e.split.startswith("R")}
        s_ids = {e.seed for e in entries if e.split.startswith("S")}
        if r_ids & s_ids:
            raise RuntimeError("R and S seed streams collided")
        manifest = DatasetManifest(spec, entries, out_dir, {
            "seed": seed,
            "counts": {s: counts.get(s, 0) for s in SPLITS},
            "paper_counts": PAPER_SPLIT_COUNTS,
            "scene": asdict(scene),
            "sensor": asdict(sensor),
            "lidar": asdict(lidar),
            "r_ground_jitter": r_ground_jitter,
        })
        manifest.validate()
        tmp = manifest_path.with_suffix(".json.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(manifest.to_dict(), f, indent=1)
        os.replace(tmp, manifest_path)
    except BaseException:
        for p in (manifest_path, manifest_path.with_suffix(".json.tmp")):
            if p.exists():
                p.unlink()
        shutil.rmtree(frames, ignore_errors=True)
        raise
    logger.info("wrote %d entries to %s", len(entries), manifest_path)
    return manifest
