"""Command-line entry point.

Every subcommand accepts ``--seed``, ``--config`` and ``--out``. The
effective configuration is built as profile defaults, then the JSON config
file, then command-line flags, and is echoed into ``run_record.json`` next
to the outputs. Exit status is 0 on success, 1 on a usage error and 2 on a
runtime failure; files a failed command created are removed again.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from . import __version__
from .evalkit import (
    DownstreamConfig,
    OracleSensor,
    run_downstream_eval,
    run_height_eval,
    write_height_report,
    write_seg_report,
)
from .models import SegmenterConfig
from .polargrid import cartesian_raster
from .profiles import PROFILES, Profile, get_profile
from .trainer import ABLATIONS, TrainConfig, ablation_preset, load_sensor, run_training
from .worldsim import DatasetManifest, LidarSimParams, OracleSensorParams, SceneParams, build_datasets

logger = logging.getLogger("radarsim")

RUN_RECORD = "run_record.json"
LOCK_NAME = ".radarsim.lock"
SPLIT_FLAGS = {"r_train": "R-train", "r_test": "R-test", "s_train": "S-train", "s_test": "S-test"}
SECTIONS = {
    "train": TrainConfig,
    "scene": SceneParams,
    "oracle": OracleSensorParams,
    "lidar": LidarSimParams,
    "downstream": DownstreamConfig,
}
HEIGHT_PRESETS = ("d", "e")  # presets that train the backward generator with real radar


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunRecord:
    command: list
    config_hash: str
    version: str
    seeds: list
    outputs: list
    duration_s: float
    config: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / RUN_RECORD
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# -- configuration -----------------------------------------------------------

def _jsonable(obj):
    if is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def profile_to_dict(profile: Profile) -> dict:
    d = {name: _jsonable(getattr(profile, name)) for name in SECTIONS}
    d["profile"] = profile.name
    d["models"] = profile.models.to_dict()
    d["counts"] = dict(profile.counts)
    return d


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def artifact_version() -> str:
    """Package version plus a digest of the installed sources, in the style of ``git describe``."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


def _with_updates(obj, updates: dict, where: str):
    known = {f.name for f in fields(obj)}
    unknown = set(updates) - known
    if unknown:
        raise UsageError(f"unknown {where} field(s): {', '.join(sorted(unknown))}")
    if isinstance(obj, DownstreamConfig) and isinstance(updates.get("segmenter"), dict):
        updates = dict(updates, segmenter=SegmenterConfig(**updates["segmenter"]))
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where} config: {exc}") from None


def apply_config(profile: Profile, overrides: dict) -> Profile:
    """Apply a config mapping: section objects, split ``counts``, or flat field names.

    A flat key must name a field of exactly one section.
    """
    grouped = {name: {} for name in SECTIONS}
    counts = dict(profile.counts)
    for key, value in overrides.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be an object")
            grouped[key].update(value)
        elif key == "counts":
            unknown = set(value) - set(counts)
            if unknown:
                raise UsageError(f"unknown split(s) in counts: {', '.join(sorted(unknown))}")
            counts.update({k: int(v) for k, v in value.items()})
        else:
            owners = [name for name, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
            if len(owners) != 1:
                what = "ambiguous" if owners else "unknown"
                raise UsageError(f"{what} config key {key!r}; nest it under one of {sorted(SECTIONS)}")
            grouped[owners[0]][key] = value
    updated = {name: _with_updates(getattr(profile, name), upd, name) for name, upd in grouped.items() if upd}
    return replace(profile, counts=counts, **updated)


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def resolve_profile(args) -> Profile:
    try:
        profile = get_profile(args.profile)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.config:
        profile = apply_config(profile, load_config_file(args.config))
    flags = {}
    if getattr(args, "steps", None) is not None:
        flags["steps"] = args.steps
    if getattr(args, "checkpoint_every", None) is not None:
        flags["checkpoint_every"] = args.checkpoint_every
    if flags:
        profile = replace(profile, train=_with_updates(profile.train, flags, "train"))
    counts = {SPLIT_FLAGS[k]: getattr(args, k) for k in SPLIT_FLAGS if getattr(args, k, None) is not None}
    if counts:
        profile = replace(profile, counts={**profile.counts, **counts})
    # --seed beats a seed from the config file
    if args.seed is None:
        args.seed = profile.train.seed
    return replace(profile, train=replace(profile.train, seed=args.seed))


# -- output handling ---------------------------------------------------------

class OutputGuard:
    """Hold the advisory lock on ``out`` and remove new files if the command fails."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.created_dir = False
        self.before: set = set()
        self.lock: Optional[FileLock] = None

    def __enter__(self):
        if self.out.exists() and not self.out.is_dir():
            raise UsageError(f"--out {self.out} exists and is not a directory")
        self.created_dir = not self.out.exists()
        self.out.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.out / LOCK_NAME))
        try:
            self.lock.acquire(timeout=0)
        except Timeout:
            if self.created_dir:
                shutil.rmtree(self.out, ignore_errors=True)
            raise RuntimeError(f"{self.out} is in use by another radarsim command") from None
        self.before = set(self.out.rglob("*"))
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self._cleanup()
        self.lock.release()
        if exc_type is not None and self.created_dir:
            shutil.rmtree(self.out, ignore_errors=True)
        return False

    def _cleanup(self):
        new = [p for p in self.out.rglob("*") if p not in self.before and p.name != LOCK_NAME]
        for p in sorted(new, key=lambda q: len(q.parts), reverse=True):
            if p.is_dir() and not p.is_symlink():
                shutil.rmtree(p, ignore_errors=True)
            else:
                p.unlink(missing_ok=True)


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _parse_presets(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in ABLATIONS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"presets must be drawn from {','.join(ABLATIONS)}")
    return names


def _load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise UsageError(f"no dataset manifest at {path}")
    return DatasetManifest.load_json(path)


def _dataset(args, profile: Profile, out: Path, outputs: list) -> DatasetManifest:
    """The ``--data`` manifest, or a fresh dataset under ``out/data``."""
    if args.data:
        manifest = _load_manifest(args.data)
    else:
        manifest = _build(profile, out / "data", args.data_seed)
        outputs.append(str(out / "data" / "manifest.json"))
    if manifest.grid != profile.grid:
        raise UsageError("dataset grid does not match the profile grid")
    return manifest


def _build(profile: Profile, out: Path, seed: int) -> DatasetManifest:
    return build_datasets(profile.counts, profile.scene, profile.oracle, profile.lidar, profile.grid, out, seed=seed)


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args, profile: Profile, out: Path) -> tuple[list, list]:
    _build(profile, out, args.seed)
    return [str(out / "manifest.json")], [args.seed]


def cmd_train(args, profile: Profile, out: Path) -> tuple[list, list]:
    outputs: list = []
    manifest = _dataset(args, profile, out, outputs)
    result = run_training(profile.train, ablation_preset(args.preset), manifest, out, profile.models,
                          resume=not args.fresh, progress=True)
    outputs += [str(result["checkpoint"]), str(result["metrics"])]
    return outputs, [args.seed]


def cmd_ablate(args, profile: Profile, out: Path) -> tuple[list, list]:
    outputs: list = []
    manifest = _dataset(args, profile, out, outputs)
    seg_rows, height_rows = [], []
    for seed in args.seeds:
        bench = run_downstream_eval(OracleSensor(profile.oracle), manifest, profile.downstream, [seed])[0]
        seg_rows.append(("benchmark", seed, bench))
    for name in args.presets:
        for seed in args.seeds:
            run_dir = out / f"{name}_s{seed}"
            config = replace(profile.train, seed=seed)
            result = run_training(config, ablation_preset(name), manifest, run_dir, profile.models,
                                  resume=not args.fresh, progress=True)
            params = load_sensor(result["checkpoint"])
            seg_rows.append((name, seed, run_downstream_eval(params, manifest, profile.downstream, [seed])[0]))
            if name in HEIGHT_PRESETS:
                height_rows.append((name, seed, run_height_eval(params, manifest, seed=seed)))
            outputs += [str(result["checkpoint"]), str(result["metrics"])]
    # the benchmark row goes last
    seg_rows = [r for r in seg_rows if r[0] != "benchmark"] + [r for r in seg_rows if r[0] == "benchmark"]
    write_seg_report(out / "table1_miou.csv", seg_rows)
    outputs.append(str(out / "table1_miou.csv"))
    if height_rows:
        write_height_report(out / "table2_height.csv", height_rows)
        outputs.append(str(out / "table2_height.csv"))
    return outputs, list(args.seeds)


def cmd_eval_seg(args, profile: Profile, out: Path) -> tuple[list, list]:
    manifest = _load_manifest(args.data)
    seeds = args.seeds or [args.seed]
    if args.oracle:
        sensor, label = OracleSensor(profile.oracle), "benchmark"
    else:
        sensor, label = load_sensor(args.checkpoint), Path(args.checkpoint).parent.name or "checkpoint"
    results = run_downstream_eval(sensor, manifest, profile.downstream, seeds)
    path = out / "seg_eval.csv"
    write_seg_report(path, [(label, s, m) for s, m in zip(seeds, results)])
    return [str(path)], seeds


def cmd_eval_height(args, profile: Profile, out: Path) -> tuple[list, list]:
    manifest = _load_manifest(args.data)
    params = load_sensor(args.checkpoint)
    m = run_height_eval(params, manifest, seed=args.seed, split=args.split, kappa=args.kappa,
                        ground_threshold=profile.downstream.ground_threshold)
    path = out / "height_eval.csv"
    write_height_report(path, [(Path(args.checkpoint).parent.name or "checkpoint", args.seed, m)])
    return [str(path)], [args.seed]


def cmd_plot(args, profile: Profile, out: Path) -> tuple[list, list]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalkit import LearnedSensor, predict_heights

    manifest = _load_manifest(args.data)
    entries = manifest.split(args.split)
    if not entries:
        raise UsageError(f"manifest has no {args.split} entries")
    entries = entries[: args.count]
    params = load_sensor(args.checkpoint)
    sensor = LearnedSensor(params)
    grid = manifest.grid
    titles = ["elevation w", "simulated x", "real x*", "predicted w"]
    fig, axes = plt.subplots(len(entries), 4, figsize=(12, 3 * len(entries)), squeeze=False)
    for row, entry in enumerate(entries):
        w = manifest.load(entry, "elevation")
        x_sim = sensor.sample(w, grid, args.seed, entry.ground_height)
        panels = [w, x_sim]
        if "radar" in entry.files:
            x_real = manifest.load(entry, "radar")
            panels += [x_real, predict_heights(params.theta_w, x_real[None], args.seed)[0]]
        else:
            panels += [None, None]
        for col, img in enumerate(panels):
            ax = axes[row, col]
            ax.set_axis_off()
            if row == 0:
                ax.set_title(titles[col])
            if img is not None:
                ax.imshow(cartesian_raster(img, args.pixels_per_meter, grid), vmin=-1, vmax=1, cmap="viridis")
    fig.tight_layout()
    path = out / f"panels_{args.split}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [str(path)], [args.seed]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval-seg": cmd_eval_seg,
    "eval-height": cmd_eval_height,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radarsim", description="Learned radar sensor model: data, training and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="random seed (default: config train.seed, else 0)")
        p.add_argument("--config", type=Path, help="JSON config overriding the profile defaults")
        p.add_argument("--profile", choices=sorted(PROFILES),
                       help="named defaults (default: $RADAR_SIM_PROFILE or desk)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        return p

    p = add("gen-data", "generate the R and S dataset splits")
    p.add_argument("--r-train", type=int)
    p.add_argument("--r-test", type=int)
    p.add_argument("--s-train", type=int)
    p.add_argument("--s-test", type=int)

    def data_args(p, generated: bool):
        p.add_argument("--data", type=Path, help="dataset directory or manifest.json")
        if generated:
            p.add_argument("--data-seed", type=int, default=0, help="seed for data generated when --data is absent")

    p = add("train", "train one ablation preset")
    p.add_argument("--preset", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints in --out")
    data_args(p, True)

    p = add("ablate", "train and evaluate presets over several seeds")
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2, 3])
    p.add_argument("--presets", type=_parse_presets, default=list(ABLATIONS))
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    data_args(p, True)

    p = add("eval-seg", "train a segmenter on simulated radar and score it on R-test")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--oracle", action="store_true", help="use the oracle sensor (benchmark)")
    p.add_argument("--seeds", type=_parse_seeds, help="segmenter seeds (default: --seed)")
    p.add_argument("--data", type=Path, required=True)

    p = add("eval-height", "masked height error of the backward model")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="R-test", choices=["R-train", "R-test"])
    p.add_argument("--kappa", default="single", choices=["single", "zero", "mean"])

    p = add("plot", "render w, x, x* and predicted w panels")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="R-test", choices=["R-train", "R-test", "S-train", "S-test"])
    p.add_argument("--count", type=int, default=3, help="number of frames")
    p.add_argument("--pixels-per-meter", type=float, default=4.0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        profile = resolve_profile(args)
    except UsageError as exc:
        print(f"radarsim: error: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    started = time.monotonic()
    config = profile_to_dict(profile)
    try:
        with OutputGuard(args.out) as guard:
            outputs, seeds = COMMANDS[args.command](args, profile, guard.out)
            RunRecord(
                command=["radarsim"] + argv,
                config_hash=config_hash(config),
                version=artifact_version(),
                seeds=seeds,
                outputs=outputs,
                duration_s=round(time.monotonic() - started, 3),
                config=config,
            ).write(guard.out)
    except UsageError as exc:
        print(f"radarsim: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit status 2
        logger.debug("command failed", exc_info=True)
        print(f"radarsim: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
