"""Acceptance criteria 1-9. Each test appends one pass/fail line to the terminal summary.

The desk-scale experiment behind criteria 7 and 8 trains presets c, d and e
on four seeds through the ``ablate`` command and takes roughly 70 minutes on
one CPU core, of which the c and e runs timed by criterion 7 take about 45.
"""

import csv
import hashlib
import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from fdcheck import check_input_gradient
from radarsim.cli import main
from radarsim.evalkit import (
    OccupancyGrid,
    compute_height_mae,
    compute_miou,
    occupancy_from_elevation,
)
from radarsim.models import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    forward_generator,
    init_parameters,
    load_checkpoint,
    sample_noise,
)
from radarsim.objectives import (
    LossWeights,
    combined_generator_objective,
    cycle_consistency_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    masked_alignment_loss,
    paired_regression_loss,
    weighted_cross_entropy,
)
from radarsim.polargrid import SENTINEL, ElevationMap, PartialElevationMap, PolarGridSpec, scale_height
from radarsim.profiles import desk_profile
from radarsim.trainer import ABLATIONS, ImagePool, read_metrics
from radarsim.worldsim import SceneParams, generate_scene

SEEDS = [0, 1, 2, 3]
DATA_SEED = 7  # pinned dataset for the desk experiment


def report(number: int, ok: bool, detail: str):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------

def _loss_examples():
    def full(v, shape=(1, 1, 3, 3)):
        return torch.full(shape, float(v), dtype=torch.float64)

    t = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    uniform = torch.zeros(1, 3, 1, 1, dtype=torch.float64)
    parts = {k: t(1.0)[0] for k in ("g_x", "g_w", "c_x", "c_w", "a_w")}
    return [
        (lsgan_discriminator_loss(full(1), full(0)), 0.0),
        (lsgan_discriminator_loss(full(0.5), full(0.5)), 0.5),
        (lsgan_discriminator_loss(full(0), full(1)), 2.0),
        (lsgan_generator_loss(full(1)), 0.0),
        (lsgan_generator_loss(full(0)), 1.0),
        (lsgan_generator_loss(t(0.2, 0.6)), 0.4),
        (cycle_consistency_loss(full(0.3), full(0.3)), 0.0),
        (cycle_consistency_loss(full(0.3), full(0.6)), 0.3),
        (cycle_consistency_loss(torch.zeros(2, 2, dtype=torch.float64), t(0.1, -0.1, 0.2, 0.0).reshape(2, 2)), 0.1),
        (masked_alignment_loss(full(0.2), full(-0.4), full(0)), 0.0),
        (masked_alignment_loss(full(0.2), full(-0.4), full(1)), 0.6),
        (masked_alignment_loss(t(0, 0, 0, 0), t(0.2, -0.4, 0.9, 0.9), t(1, 1, 0, 0)), 0.3),
        (paired_regression_loss(full(0.1), full(0.1)), 0.0),
        (paired_regression_loss(full(0.1), full(0.6)), 0.5),
        (weighted_cross_entropy(uniform, torch.zeros(1, 1, 1, dtype=torch.long), [1, 1, 1]), math.log(3)),
        (weighted_cross_entropy(uniform, torch.ones(1, 1, 1, dtype=torch.long), [1, 50, 1]), 50 * math.log(3)),
        (combined_generator_objective(parts, LossWeights(), ["G_x", "G_w", "C_x", "C_w", "A_w"]).total, 32.0),
    ]


def test_criterion_1_loss_suite():
    started = time.monotonic()
    bad = [k for k, (got, want) in enumerate(_loss_examples()) if abs(float(got) - want) > 1e-6]
    worst = 0.0
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        a, b = (torch.rand((1, 1, 4, 5), generator=g, dtype=torch.float64) * 2 - 1 for _ in range(2))
        mask = (torch.rand(a.shape, generator=g) > 0.5).double()
        logits = torch.randn((2, 3, 4, 5), generator=g, dtype=torch.float64)
        labels = torch.randint(0, 3, (2, 4, 5), generator=g)
        errs = [
            check_input_gradient(cycle_consistency_loss, [a, b], index=1),
            check_input_gradient(paired_regression_loss, [a, b], index=1),
            check_input_gradient(lambda p, y: masked_alignment_loss(p, y, mask), [a, b]),
            check_input_gradient(lsgan_discriminator_loss, [a, b], index=0),
            check_input_gradient(lsgan_discriminator_loss, [a, b], index=1),
            check_input_gradient(lsgan_generator_loss, [a]),
            check_input_gradient(lambda z: weighted_cross_entropy(z, labels, [1, 50, 1]), [logits]),
        ]
        worst = max(worst, *errs)
    elapsed = time.monotonic() - started
    ok = not bad and worst < 1e-3 and elapsed < 60
    report(1, ok, f"examples failing {bad}; worst gradient rel. error {worst:.2e}; {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_metric_oracles():
    started = time.monotonic()
    rng = np.random.default_rng(2)
    spec = PolarGridSpec(num_azimuths=8, num_range_bins=8)
    lo, hi = spec.height_min, spec.height_max
    mismatches = 0
    worst = 0.0
    for _ in range(100):
        pred = rng.integers(0, 3, (8, 8))
        label = rng.integers(0, 3, (8, 8))
        m = compute_miou(pred, label)
        for c, name, iou in ((FREE, "free", m.iou_free), (OCCUPIED, "occupied", m.iou_occ)):
            tp = fp = fn = 0
            for p, l in zip(pred.flat, label.flat):
                tp += p == c and l == c
                fp += p == c and l != c
                fn += p != c and l == c  # includes unknown predictions on labelled cells
            mismatches += (m.tp[name], m.fp[name], m.fn[name]) != (tp, fp, fn)
            worst = max(worst, abs(iou - (tp / (tp + fp + fn) if tp + fp + fn else 0.0)))

        y_vals = rng.uniform(-1, 1, (8, 8))
        mask = (rng.random((8, 8)) < 0.6).astype(np.float32)
        y = PartialElevationMap(np.where(mask > 0, y_vals, SENTINEL).astype(np.float32), mask, spec)
        p_vals = rng.uniform(-1, 1, (8, 8)).astype(np.float32)
        h = compute_height_mae(ElevationMap(p_vals, spec), y, OccupancyGrid(label))
        for c, name, got in ((FREE, "free", h.mae_free_cm), (OCCUPIED, "occupied", h.mae_occ_cm)):
            total, n = 0.0, 0
            for i in range(8):
                for j in range(8):
                    if mask[i, j] and label[i, j] == c:
                        a = (float(p_vals[i, j]) + 1) / 2 * (hi - lo) + lo
                        b = (float(y.heights[i, j]) + 1) / 2 * (hi - lo) + lo
                        total += abs(a - b) * 100
                        n += 1
            mismatches += h.counts[name] != n
            if n:
                worst = max(worst, abs(got - total / n))
            else:
                mismatches += got is not None
    elapsed = time.monotonic() - started
    ok = mismatches == 0 and worst <= 1e-9 and elapsed < 60
    report(2, ok, f"count mismatches {mismatches}; worst ratio error {worst:.1e}; {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------

def test_criterion_3_pool_statistics():
    pool = ImagePool(50, np.random.default_rng(3))
    for k in range(50):
        pool.query(torch.full((1,), float(k)))
    violated = False
    for k in range(10_000):
        pool.query(torch.full((1,), float(50 + k)))
        violated |= len(pool) > 50
    rate = pool.swaps / 10_000
    ok = abs(rate - 0.5) <= 0.02 and not violated and len(pool) == 50
    report(3, ok, f"swap rate {rate:.4f} over 10^4 queries; capacity violated: {violated}")


# 4 -------------------------------------------------------------------------

def _digest(directory, exclude=("run_record.json", ".radarsim.lock")):
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name not in exclude:
            text = p.read_bytes()
            if p.name == "manifest.json":
                text = text.replace(str(directory).encode(), b"")
            out[str(p.relative_to(directory))] = hashlib.sha256(text).hexdigest()
    return out


def _same_tree(a, b) -> bool:
    if torch.is_tensor(a):
        return torch.is_tensor(b) and a.dtype == b.dtype and torch.equal(a, b)
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(_same_tree(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return isinstance(b, (list, tuple)) and len(a) == len(b) and all(map(_same_tree, a, b))
    return a == b


def test_criterion_4_determinism(tmp_path):
    started = time.monotonic()
    conf = tmp_path / "eval.json"
    conf.write_text(json.dumps({"downstream": {"epochs": 1, "samples_per_scene": 1}}))
    problems = []

    def run(argv):
        if main(argv) != 0:
            problems.append(f"exit status != 0 for {argv[0]}")

    for tag in ("a", "b"):
        run(["gen-data", "--out", str(tmp_path / f"data_{tag}"), "--seed", "0"])
    if _digest(tmp_path / "data_a") != _digest(tmp_path / "data_b"):
        problems.append("gen-data differs")
    data = str(tmp_path / "data_a")
    train = ["train", "--data", data, "--preset", "e", "--checkpoint-every", "50"]
    for tag in ("a", "b"):
        run(train + ["--out", str(tmp_path / f"train_{tag}"), "--steps", "100"])
    if _digest(tmp_path / "train_a") != _digest(tmp_path / "train_b"):
        problems.append("train differs")
    # interrupted at step 50, then resumed to 100
    run(train + ["--out", str(tmp_path / "train_r"), "--steps", "50"])
    run(train + ["--out", str(tmp_path / "train_r"), "--steps", "100"])
    full = read_metrics(tmp_path / "train_a" / "metrics.csv")
    resumed = read_metrics(tmp_path / "train_r" / "metrics.csv")
    if full != resumed or len(full) != 100:
        problems.append("resumed loss curve differs")
    # torch.save output is not byte-stable across a reload, so compare the final state by content
    a, _ = load_checkpoint(tmp_path / "train_a" / "ckpt_100.bin")
    r, _ = load_checkpoint(tmp_path / "train_r" / "ckpt_100.bin")
    if not _same_tree(a, r):
        problems.append("resumed final state differs")
    ckpt = str(tmp_path / "train_a" / "ckpt_100.bin")
    for tag in ("a", "b"):
        run(["eval-height", "--out", str(tmp_path / f"height_{tag}"), "--data", data, "--checkpoint", ckpt])
        run(["eval-seg", "--out", str(tmp_path / f"seg_{tag}"), "--data", data, "--checkpoint", ckpt,
             "--config", str(conf)])
    for kind in ("height", "seg"):
        if _digest(tmp_path / f"{kind}_a") != _digest(tmp_path / f"{kind}_b"):
            problems.append(f"eval-{kind} differs")
    elapsed = time.monotonic() - started
    ok = not problems and elapsed < 300
    report(4, ok, f"{'; '.join(problems) or 'all reruns bit-identical, resume at 50 matches'}; {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------

def test_criterion_5_stochastic_generator():
    cfg = desk_profile().models
    params = init_parameters(cfg, 0)
    w = torch.from_numpy(generate_scene(SceneParams(rng_seed=5), cfg.grid).heights)[None, None]
    g = torch.Generator().manual_seed(5)
    with torch.no_grad():
        samples = torch.cat([forward_generator(w, sample_noise(w.shape, g), params.theta_x) for _ in range(32)])
    frac = float((samples.var(dim=0) > 0).float().mean())
    report(5, frac >= 0.01, f"{frac:.1%} of cells vary over 32 noise draws (need >= 1%)")


# 6 -------------------------------------------------------------------------

# reference ablation table: training data and objective check marks per preset
REFERENCE_TABLE = {
    "a": ({"x*", "y"}, {"A_x"}),
    "b": ({"x*", "y"}, {"A_x", "G_x"}),
    "c": ({"x*", "w"}, {"G_x"}),
    "d": ({"x*", "w"}, {"G_x", "G_w", "C_x", "C_w"}),
    "e": ({"x*", "y", "w"}, {"A_w", "G_x", "G_w", "C_x", "C_w"}),
}


def test_criterion_6_preset_fidelity():
    wrong = [n for n, (needs, terms) in REFERENCE_TABLE.items()
             if n not in ABLATIONS or ABLATIONS[n].data_needs != needs or ABLATIONS[n].active_terms != terms]
    ok = not wrong and set(ABLATIONS) == set(REFERENCE_TABLE)
    report(6, ok, f"presets disagreeing with the table: {wrong or 'none'}")


# 7, 8 ------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_ablation")
    seeds = ",".join(map(str, SEEDS))
    # only c, e and the benchmark count toward the runtime budget; d feeds the height comparison
    started = time.monotonic()
    status = main(["ablate", "--out", str(out / "ce"), "--profile", "desk", "--presets", "c,e",
                   "--seeds", seeds, "--data-seed", str(DATA_SEED)])
    elapsed = time.monotonic() - started
    assert status == 0, "ablate command failed"
    status = main(["ablate", "--out", str(out / "d"), "--profile", "desk", "--presets", "d",
                   "--seeds", seeds, "--data", str(out / "ce" / "data")])
    assert status == 0, "ablate command failed"

    def rows(name):
        found = []
        for part in ("ce", "d"):
            with open(out / part / name, newline="") as f:
                found += [r for r in csv.DictReader(f) if r["seed"] != "mean±std"]
        return found

    seg = {(r["config"], int(r["seed"])): float(r["miou"]) for r in rows("table1_miou.csv")}
    height = {(r["config"], int(r["seed"])): float(r["mae_mean_cm"]) for r in rows("table2_height.csv")}
    return {"out": out, "seg": seg, "height": height, "elapsed": elapsed}


@pytest.mark.slow
def test_criterion_7_desk_end_to_end(desk_experiment):
    seg = desk_experiment["seg"]
    e = [seg[("e", s)] for s in SEEDS]
    c = [seg[("c", s)] for s in SEEDS]
    bench = [seg[("benchmark", s)] for s in SEEDS]
    wins = sum(a > b for a, b in zip(e, c))
    ratio = float(np.mean(e) / np.mean(bench))
    minutes = desk_experiment["elapsed"] / 60
    ok = wins >= 3 and ratio >= 0.7 and minutes <= 60
    report(7, ok, f"(e) beats (c) in {wins}/4 seeds; (e) reaches {ratio:.0%} of benchmark "
                  f"(e {np.mean(e):.3f}, c {np.mean(c):.3f}, bench {np.mean(bench):.3f}); {minutes:.1f} min")


@pytest.mark.slow
def test_criterion_8_masked_alignment(desk_experiment):
    h = desk_experiment["height"]
    e = [h[("e", s)] for s in SEEDS]
    d = [h[("d", s)] for s in SEEDS]
    wins = sum(a < b for a, b in zip(e, d))
    report(8, wins >= 3, f"(e) height MAE below (d) in {wins}/4 seeds (e {np.mean(e):.1f} cm, d {np.mean(d):.1f} cm)")


@pytest.mark.slow
def test_discriminator_losses_stay_bounded(desk_experiment):
    # after warm-up an LSGAN discriminator hovers between "perfect" (0) and "fooled" (2)
    for run in sorted(desk_experiment["out"].glob("*/[cde]_s*")):
        rows = read_metrics(run / "metrics.csv")[500:]
        for key in ("d_x", "d_w"):
            vals = [r[key] for r in rows if r[key] is not None]
            if vals:
                assert 0 < np.mean(vals) <= 2, (run.name, key, np.mean(vals))


# 9 -------------------------------------------------------------------------

def test_criterion_9_labeler_invariants():
    grid = desk_profile().grid
    violations = 0
    for seed in range(100):
        lab = occupancy_from_elevation(generate_scene(SceneParams(rng_seed=seed), grid)).labels
        for ray in lab:
            occ = np.nonzero(ray == OCCUPIED)[0]
            first = occ[0] if len(occ) else len(ray)
            violations += int(np.any(ray[:first] == UNKNOWN))
    flat = ElevationMap(np.full(grid.shape, scale_height(0.0, grid), np.float32), grid)
    flat_ok = bool(np.all(occupancy_from_elevation(flat).labels == FREE))
    report(9, violations == 0 and flat_ok,
           f"{violations} rays with unknown before the first return over 100 scenes; flat scene all free: {flat_ok}")
