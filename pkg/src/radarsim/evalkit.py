"""Downstream evaluation: occupancy labels, segmenter training, mIoU and height MAE."""

from __future__ import annotations

import copy
import dataclasses
import csv
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .models import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    SegmenterConfig,
    UNetSegmenter,
    backward_generator,
    forward_generator,
    init_parameters,
    ModelConfigs,
    predict_classes,
    sample_noise,
    segment,
)
from .objectives import weighted_cross_entropy
from .polargrid import ElevationMap, PartialElevationMap, PolarGridSpec, unscale_height
from .worldsim import DatasetManifest, OracleSensorParams, oracle_radar

logger = logging.getLogger(__name__)

DEFAULT_GROUND_THRESHOLD = 0.3


@dataclass
class OccupancyGrid:
    labels: np.ndarray  # int8 codes FREE / OCCUPIED / UNKNOWN

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if not np.all(np.isin(self.labels, (FREE, OCCUPIED, UNKNOWN))):
            raise ValueError("labels must be free, occupied or unknown")


def occupancy_labels(heights_m: np.ndarray, measured: np.ndarray, ground_height: float,
                     ground_threshold: float) -> np.ndarray:
    """Ray-wise labelling on metric heights; arrays are ``(..., azimuth, range)``.

    Measured cells higher than ``ground + threshold`` are returns (occupied).
    Cells before the first return on a ray are free. On rays without a
    return, free space extends to the farthest measured cell.
    """
    if not ground_threshold > 0:
        raise ValueError("ground_threshold must be positive")
    measured = measured.astype(bool)
    returns = measured & (heights_m > ground_height + ground_threshold)
    n = heights_m.shape[-1]
    j = np.arange(n)
    has_return = returns.any(axis=-1)
    first_return = np.where(has_return, np.argmax(returns, axis=-1), n)
    last_measured = np.where(measured.any(axis=-1), n - 1 - np.argmax(measured[..., ::-1], axis=-1), -1)
    limit = np.where(has_return, first_return, last_measured + 1)
    labels = np.full(heights_m.shape, UNKNOWN, dtype=np.int8)
    labels[j < limit[..., None]] = FREE
    labels[returns] = OCCUPIED
    return labels


def occupancy_from_elevation(src: Union[ElevationMap, PartialElevationMap], ground_threshold: float = DEFAULT_GROUND_THRESHOLD,
                             ground_height: float = 0.0) -> OccupancyGrid:
    if isinstance(src, PartialElevationMap):
        heights, measured = src.heights, src.mask > 0
    elif isinstance(src, ElevationMap):
        heights, measured = src.heights, np.ones(src.heights.shape, bool)
    else:
        raise TypeError("expected an ElevationMap or PartialElevationMap")
    h = unscale_height(heights.astype(np.float64), src.grid)
    return OccupancyGrid(occupancy_labels(h, measured, ground_height, ground_threshold))


@dataclass
class SegMetrics:
    tp: dict
    fp: dict
    fn: dict
    iou_free: float
    iou_occ: float
    miou: float
    undefined: tuple = ()

    def as_row(self) -> dict:
        return {"iou_free": self.iou_free, "iou_occ": self.iou_occ, "miou": self.miou}


def confusion_counts(pred: np.ndarray, label: np.ndarray) -> dict:
    """Per-class TP/FP/FN for free and occupied.

    A prediction of free or occupied on an unknown-labelled cell counts as a
    false positive for the predicted class; an unknown prediction on a
    free or occupied cell is a false negative for the labelled class.
    """
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    counts = {}
    for c in (FREE, OCCUPIED):
        p, l = pred == c, label == c
        counts[c] = (int(np.sum(p & l)), int(np.sum(p & ~l)), int(np.sum(~p & l)))
    return counts


def metrics_from_counts(counts: dict) -> SegMetrics:
    ious, undefined = {}, []
    for c, name in ((FREE, "free"), (OCCUPIED, "occupied")):
        tp, fp, fn = counts[c]
        denom = tp + fp + fn
        if denom == 0:
            undefined.append(name)
            ious[c] = 0.0
        else:
            ious[c] = tp / denom
    return SegMetrics(
        tp={"free": counts[FREE][0], "occupied": counts[OCCUPIED][0]},
        fp={"free": counts[FREE][1], "occupied": counts[OCCUPIED][1]},
        fn={"free": counts[FREE][2], "occupied": counts[OCCUPIED][2]},
        iou_free=ious[FREE], iou_occ=ious[OCCUPIED],
        miou=(ious[FREE] + ious[OCCUPIED]) / 2,
        undefined=tuple(undefined),
    )


def compute_miou(pred, label) -> SegMetrics:
    """Dataset-level IoU: counts are pooled over every frame before dividing.

    ``pred`` and ``label`` are arrays (any shape, e.g. stacked frames) or
    sequences of :class:`OccupancyGrid`.
    """
    def as_array(x):
        if isinstance(x, OccupancyGrid):
            return x.labels
        if isinstance(x, (list, tuple)):
            return np.stack([as_array(i) for i in x])
        return np.asarray(x)

    return metrics_from_counts(confusion_counts(as_array(pred), as_array(label)))


@dataclass
class HeightMetrics:
    mae_free_cm: Optional[float]
    mae_occ_cm: Optional[float]
    mae_mean_cm: float
    counts: dict = field(default_factory=dict)
    absent: tuple = ()


def height_error_sums(pred_scaled: np.ndarray, y_scaled: np.ndarray, mask: np.ndarray, labels: np.ndarray,
                      grid: PolarGridSpec) -> dict:
    """Summed absolute error (cm) and cell counts per class over observed cells."""
    pred_scaled, y_scaled = np.asarray(pred_scaled), np.asarray(y_scaled)
    if pred_scaled.shape != y_scaled.shape or mask.shape != y_scaled.shape or labels.shape != y_scaled.shape:
        raise ValueError("pred, y, mask and labels must share a shape")
    obs = np.asarray(mask) > 0
    err = np.zeros(y_scaled.shape)
    err[obs] = np.abs(unscale_height(pred_scaled[obs].astype(np.float64), grid)
                      - unscale_height(y_scaled[obs].astype(np.float64), grid)) * 100.0
    out = {}
    for c in (FREE, OCCUPIED):
        sel = obs & (labels == c)
        out[c] = (float(err[sel].sum()), int(sel.sum()))
    return out


def height_metrics_from_sums(sums: dict) -> HeightMetrics:
    per = {}
    absent = []
    for c, name in ((FREE, "free"), (OCCUPIED, "occupied")):
        total, n = sums[c]
        if n == 0:
            absent.append(name)
            per[c] = None
        else:
            per[c] = total / n
    present = [v for v in per.values() if v is not None]
    mean = sum(present) / len(present) if present else 0.0
    return HeightMetrics(per[FREE], per[OCCUPIED], mean,
                         {"free": sums[FREE][1], "occupied": sums[OCCUPIED][1]}, tuple(absent))


def compute_height_mae(pred, y, labels, grid: Optional[PolarGridSpec] = None) -> HeightMetrics:
    """MAE in centimetres between predicted and measured heights, per class.

    ``pred`` is an :class:`ElevationMap` (or array), ``y`` a
    :class:`PartialElevationMap` and ``labels`` an :class:`OccupancyGrid`
    (or arrays with a leading frame axis; counts are pooled).
    """
    if isinstance(y, PartialElevationMap):
        grid = y.grid
        y_h, mask = y.heights, y.mask
    else:
        y_h, mask = y
    pred_h = pred.heights if isinstance(pred, ElevationMap) else np.asarray(pred)
    lab = labels.labels if isinstance(labels, OccupancyGrid) else np.asarray(labels)
    if grid is None:
        raise ValueError("grid is required for array inputs")
    return height_metrics_from_sums(height_error_sums(pred_h, y_h, mask, lab, grid))


# ---------------------------------------------------------------------------
# downstream segmentation experiment


@dataclass
class DownstreamConfig:
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 4
    holdout_fraction: float = 0.1
    occupied_weight: float = 50.0
    samples_per_scene: int = 1
    ground_threshold: float = DEFAULT_GROUND_THRESHOLD
    label_source: str = "dense"  # labels for R-test: "dense" elevation or "partial" lidar


class OracleSensor:
    """Bypass mode: the oracle radar stands in for a learned forward model."""

    def __init__(self, params: OracleSensorParams):
        self.params = params

    def sample(self, w: np.ndarray, grid: PolarGridSpec, seed: int, ground_height: float = 0.0) -> np.ndarray:
        params = dataclasses.replace(self.params, ground_level=ground_height)
        return oracle_radar(ElevationMap(w, grid), params, seed).power


class LearnedSensor:
    def __init__(self, params):
        self.theta_x = params.theta_x.eval()

    @torch.no_grad()
    def sample(self, w: np.ndarray, grid: PolarGridSpec, seed: int, ground_height: float = 0.0) -> np.ndarray:
        t = torch.from_numpy(w)[None, None]
        eps = sample_noise(t.shape, torch.Generator().manual_seed(int(seed)))
        return forward_generator(t, eps, self.theta_x)[0, 0].numpy()


def _labels_for_entry(manifest: DatasetManifest, entry, source: str, threshold: float) -> np.ndarray:
    grid = manifest.grid
    if source == "dense":
        w = ElevationMap(manifest.load(entry, "elevation"), grid)
        return occupancy_from_elevation(w, threshold, entry.ground_height).labels
    if source == "partial":
        y = PartialElevationMap(manifest.load(entry, "partial"), manifest.load(entry, "elevation_mask"), grid)
        return occupancy_from_elevation(y, threshold, entry.ground_height).labels
    raise ValueError(f"unknown label source {source!r}")


def simulated_training_set(sensor, manifest: DatasetManifest, cfg: DownstreamConfig, seed: int):
    """Radar samples and dense labels for every S-train scene."""
    xs, labels, groups = [], [], []
    for k, entry in enumerate(manifest.split("S-train")):
        w = manifest.load(entry, "elevation")
        lab = occupancy_from_elevation(ElevationMap(w, manifest.grid), cfg.ground_threshold,
                                       entry.ground_height).labels
        for s in range(cfg.samples_per_scene):
            sample_seed = int(np.random.SeedSequence([seed, k, s]).generate_state(1)[0])
            xs.append(sensor.sample(w, manifest.grid, sample_seed, entry.ground_height))
            labels.append(lab)
            groups.append(k)
    return np.stack(xs).astype(np.float32), np.stack(labels).astype(np.int64), np.array(groups)


@torch.no_grad()
def predict(model: UNetSegmenter, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(x), batch_size):
        t = torch.from_numpy(x[i: i + batch_size])[:, None]
        out.append(predict_classes(segment(t, model)).numpy())
    return np.concatenate(out).astype(np.int8)


def train_segmenter(x: np.ndarray, labels: np.ndarray, groups: np.ndarray, cfg: DownstreamConfig, grid: PolarGridSpec,
                    seed: int) -> tuple[UNetSegmenter, list]:
    """Fit the segmenter, keeping the epoch with the best holdout mIoU."""
    rng = np.random.default_rng([seed, 3])
    scenes = np.unique(groups)
    n_hold = max(1, int(round(cfg.holdout_fraction * len(scenes)))) if len(scenes) > 1 else 0
    hold_scenes = set(rng.permutation(scenes)[:n_hold].tolist())
    hold = np.array([g in hold_scenes for g in groups])
    train_idx = np.nonzero(~hold)[0]
    if n_hold == 0:
        hold = np.ones(len(groups), bool)
    model = init_parameters(ModelConfigs(grid=grid, segmenter=cfg.segmenter), seed).alpha
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    weights = [1.0, cfg.occupied_weight, 1.0]
    best, best_state, history = -1.0, None, []
    xt = torch.from_numpy(x)[:, None]
    lt = torch.from_numpy(labels)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(train_idx)
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i: i + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample per channel
            loss = weighted_cross_entropy(segment(xt[idx], model), lt[idx], weights)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        m = compute_miou(predict(model, x[hold]), labels[hold])
        history.append(m.miou)
        if m.miou > best:
            best, best_state = m.miou, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return model, history


def evaluate_segmenter(model: UNetSegmenter, manifest: DatasetManifest, cfg: DownstreamConfig,
                       split: str = "R-test") -> SegMetrics:
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split} entries")
    x = np.stack([manifest.load(e, "radar") for e in entries])
    labels = np.stack([_labels_for_entry(manifest, e, cfg.label_source, cfg.ground_threshold) for e in entries])
    return compute_miou(predict(model, x), labels)


def run_downstream_eval(sensor, manifest: DatasetManifest, cfg: DownstreamConfig, seeds: Sequence[int]) -> list:
    """Train a segmenter on simulated radar per seed and score it on R-test.

    ``sensor`` is a :class:`LearnedSensor`, an :class:`OracleSensor`
    (benchmark bypass) or trained :class:`~radarsim.models.ModelParameters`.
    """
    if not manifest.split("S-train"):
        raise ValueError("manifest has no S-train entries")
    if not manifest.split("R-test"):
        raise ValueError("manifest has no R-test entries")
    if not hasattr(sensor, "sample"):
        sensor = LearnedSensor(sensor)
    results = []
    for seed in seeds:
        x, labels, groups = simulated_training_set(sensor, manifest, cfg, seed)
        model, history = train_segmenter(x, labels, groups, cfg, manifest.grid, seed)
        m = evaluate_segmenter(model, manifest, cfg)
        logger.info("seed %d holdout %s -> R-test miou %.4f", seed, [round(h, 3) for h in history], m.miou)
        results.append(m)
    return results


@torch.no_grad()
def predict_heights(theta_w, x: np.ndarray, seed: int, kappa: str = "single", draws: int = 8) -> np.ndarray:
    """Backward-model elevation for each radar frame.

    ``kappa`` selects the noise policy: ``single`` (one pinned draw per
    frame), ``zero`` or ``mean`` (average over ``draws`` samples).
    """
    theta_w.eval()
    out = []
    for k, frame in enumerate(x):
        t = torch.from_numpy(frame)[None, None]
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
        if kappa == "zero":
            pred = backward_generator(t, torch.zeros_like(t), theta_w)
        elif kappa == "single":
            pred = backward_generator(t, sample_noise(t.shape, gen), theta_w)
        elif kappa == "mean":
            pred = torch.stack([backward_generator(t, sample_noise(t.shape, gen), theta_w)
                                for _ in range(draws)]).mean(0)
        else:
            raise ValueError(f"unknown kappa policy {kappa!r}")
        out.append(pred[0, 0].numpy())
    return np.stack(out)


def run_height_eval(params, manifest: DatasetManifest, seed: int = 0, split: str = "R-test", kappa: str = "single",
                    ground_threshold: float = DEFAULT_GROUND_THRESHOLD) -> HeightMetrics:
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split} entries")
    grid = manifest.grid
    x = np.stack([manifest.load(e, "radar") for e in entries])
    y = np.stack([manifest.load(e, "partial") for e in entries])
    mask = np.stack([manifest.load(e, "elevation_mask") for e in entries])
    labels = np.stack([_labels_for_entry(manifest, e, "partial", ground_threshold) for e in entries])
    pred = predict_heights(params.theta_w, x, seed, kappa)
    return height_metrics_from_sums(height_error_sums(pred, y, mask, labels, grid))


def _mean_std(values):
    values = list(values)
    if not values:
        return float("nan"), float("nan")
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def write_seg_report(path, rows: list) -> None:
    """``rows`` holds ``(config, seed, SegMetrics)``; one aggregate row per config follows."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "seed", "iou_free", "iou_occ", "miou"])
        for config, seed, m in rows:
            w.writerow([config, seed, repr(m.iou_free), repr(m.iou_occ), repr(m.miou)])
        for config in dict.fromkeys(r[0] for r in rows):
            ms = [m for c, _, m in rows if c == config]
            cells = []
            for attr in ("iou_free", "iou_occ", "miou"):
                mu, sd = _mean_std(getattr(m, attr) for m in ms)
                cells.append(f"{mu:.4f}±{sd:.4f}")
            w.writerow([config, "mean±std"] + cells)


def write_height_report(path, rows: list) -> None:
    path = Path(path)

    def fmt(v):
        return "" if v is None else repr(v)

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "seed", "mae_free_cm", "mae_occ_cm", "mae_mean_cm"])
        for config, seed, m in rows:
            w.writerow([config, seed, fmt(m.mae_free_cm), fmt(m.mae_occ_cm), fmt(m.mae_mean_cm)])
        for config in dict.fromkeys(r[0] for r in rows):
            ms = [m for c, _, m in rows if c == config]
            cells = []
            for attr in ("mae_free_cm", "mae_occ_cm", "mae_mean_cm"):
                mu, sd = _mean_std(getattr(m, attr) for m in ms if getattr(m, attr) is not None)
                cells.append(f"{mu:.2f}±{sd:.2f}")
            w.writerow([config, "mean±std"] + cells)
