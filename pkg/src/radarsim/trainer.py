"""Joint adversarial training of the forward and backward sensor models."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .models import (
    CorruptCheckpoint,
    ModelConfigs,
    ModelParameters,
    backward_generator,
    discriminate,
    forward_generator,
    init_parameters,
    load_checkpoint,
    sample_noise,
    save_checkpoint,
)
from .objectives import (
    BREAKDOWN_FIELDS,
    LossBreakdown,
    LossWeights,
    combined_generator_objective,
    cycle_consistency_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    masked_alignment_loss,
    paired_regression_loss,
)
from .worldsim import DatasetManifest

logger = logging.getLogger(__name__)

KAPPA_POLICY = "resampled per branch"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class AblationSpec:
    name: str
    active_terms: frozenset
    forward_input: str  # "partial_y" or "sim_w"
    data_needs: frozenset

    @property
    def uses_backward(self) -> bool:
        return bool(self.active_terms & {"A_w", "G_w", "C_x", "C_w"})

    def lower_terms(self) -> set:
        return {t.lower() for t in self.active_terms}


def _spec(name, terms, forward_input, needs):
    return AblationSpec(name, frozenset(terms), forward_input, frozenset(needs))


ABLATIONS = {
    "a": _spec("a", {"A_x"}, "partial_y", {"x*", "y"}),
    "b": _spec("b", {"A_x", "G_x"}, "partial_y", {"x*", "y"}),
    "c": _spec("c", {"G_x"}, "sim_w", {"x*", "w"}),
    "d": _spec("d", {"G_x", "G_w", "C_x", "C_w"}, "sim_w", {"x*", "w"}),
    "e": _spec("e", {"A_w", "G_x", "G_w", "C_x", "C_w"}, "sim_w", {"x*", "y", "w"}),
}


def ablation_preset(name: str) -> AblationSpec:
    try:
        return ABLATIONS[name]
    except KeyError:
        raise ValueError(f"unknown ablation preset {name!r}; expected one of {sorted(ABLATIONS)}") from None


@dataclass
class TrainConfig:
    steps: int = 500_000
    learning_rate: float = 2e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 10_000
    pool_capacity: int = 50
    desk_scale: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.steps < 1 or self.batch_size < 1 or self.checkpoint_every < 1 or self.pool_capacity < 1:
            raise ValueError("steps, batch_size, checkpoint_every and pool_capacity must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class ImagePool:
    """History buffer of generated frames for discriminator updates.

    Until full, every query is stored and returned unchanged. Afterwards,
    with probability 1/2 a random stored frame is returned and replaced by
    the query, otherwise the query itself is returned.
    """

    def __init__(self, capacity: int = 50, rng: Optional[np.random.Generator] = None):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.stored: list = []
        self.rng = rng if rng is not None else np.random.default_rng()
        self.swaps = 0

    def __len__(self):
        return len(self.stored)

    def query(self, item: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return item
        if self.stored and item.shape != self.stored[0].shape:
            raise ValueError("pool item shape mismatch")
        item = item.detach().clone()
        if len(self.stored) < self.capacity:
            self.stored.append(item)
            return item
        if self.rng.random() < 0.5:
            k = int(self.rng.integers(len(self.stored)))
            out = self.stored[k]
            self.stored[k] = item
            self.swaps += 1
            return out
        return item

    def query_batch(self, items: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.query(items[i: i + 1]) for i in range(items.shape[0])], dim=0)

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "stored": list(self.stored),
                "rng": self.rng.bit_generator.state, "swaps": self.swaps}

    def load_state_dict(self, state: dict):
        self.capacity = state["capacity"]
        self.stored = list(state["stored"])
        self.rng.bit_generator.state = state["rng"]
        self.swaps = state["swaps"]


def pool_query(pool: ImagePool, item: torch.Tensor) -> torch.Tensor:
    return pool.query(item)


@dataclass
class Batch:
    x_real: Optional[torch.Tensor] = None
    y: Optional[torch.Tensor] = None
    y_mask: Optional[torch.Tensor] = None
    w: Optional[torch.Tensor] = None

    def roles(self) -> set:
        have = set()
        if self.x_real is not None:
            have.add("x*")
        if self.y is not None and self.y_mask is not None:
            have.add("y")
        if self.w is not None:
            have.add("w")
        return have


@dataclass
class TrainState:
    params: ModelParameters
    pools: dict
    noise: torch.Generator
    config: TrainConfig

    @property
    def step(self) -> int:
        return self.params.step


def attach_optimizers(params: ModelParameters, config: TrainConfig):
    def adam(ps):
        return torch.optim.Adam(ps, lr=config.learning_rate, betas=config.betas)

    params.optimizers = {
        "theta": adam(list(params.theta_x.parameters()) + list(params.theta_w.parameters())),
        "beta_x": adam(params.beta_x.parameters()),
        "beta_w": adam(params.beta_w.parameters()),
    }


def new_train_state(configs: ModelConfigs, config: TrainConfig) -> TrainState:
    params = init_parameters(configs, config.seed)
    attach_optimizers(params, config)
    pools = {
        "x": ImagePool(config.pool_capacity, np.random.default_rng([config.seed, 101])),
        "w": ImagePool(config.pool_capacity, np.random.default_rng([config.seed, 102])),
    }
    noise = torch.Generator().manual_seed(int(config.seed) * 7919 + 17)
    return TrainState(params, pools, noise, config)


def _set_trainable(module: torch.nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _finite(name: str, value: torch.Tensor, step: int):
    v = float(value.detach())
    if not math.isfinite(v):
        raise TrainingDiverged(f"non-finite {name} ({v}) at step {step}")


def train_step(state: TrainState, batch: Batch, spec: AblationSpec, weights: LossWeights) -> LossBreakdown:
    """One generator update followed by one discriminator update.

    Four fresh noise grids are drawn per step, one per generator pass:
    ``eps`` for the forward fake, ``kappa`` for the reconstruction of ``w``,
    ``kappa`` for the backward fake and ``eps`` for the reconstruction of
    ``x*``. Returns the loss values as floats.
    """
    missing = set(spec.data_needs) - batch.roles()
    if missing:
        raise ValueError(f"batch lacks data roles {sorted(missing)} required by preset {spec.name}")
    p = state.params
    terms = spec.lower_terms()
    ref = batch.x_real
    noises = [sample_noise(ref.shape, state.noise, ref.dtype) for _ in range(4)]
    eps_fake, kappa_rec, kappa_fake, eps_rec = noises

    _set_trainable(p.beta_x, False)
    _set_trainable(p.beta_w, False)
    gen_in = batch.y if spec.forward_input == "partial_y" else batch.w
    parts = {}
    x_fake = w_fake = None
    if terms & {"a_x", "g_x", "c_w"}:
        x_fake = forward_generator(gen_in, eps_fake, p.theta_x)
    if "a_x" in terms:
        parts["a_x"] = paired_regression_loss(x_fake, batch.x_real)
    if "g_x" in terms:
        parts["g_x"] = lsgan_generator_loss(discriminate(x_fake, p.beta_x))
    if "c_w" in terms:
        w_rec = backward_generator(x_fake, kappa_rec, p.theta_w)
        parts["c_w"] = cycle_consistency_loss(batch.w, w_rec)
    if terms & {"g_w", "c_x", "a_w"}:
        w_fake = backward_generator(batch.x_real, kappa_fake, p.theta_w)
    if "g_w" in terms:
        parts["g_w"] = lsgan_generator_loss(discriminate(w_fake, p.beta_w))
    if "a_w" in terms:
        parts["a_w"] = masked_alignment_loss(w_fake, batch.y, batch.y_mask)
    if "c_x" in terms:
        x_rec = forward_generator(w_fake, eps_rec, p.theta_x)
        parts["c_x"] = cycle_consistency_loss(batch.x_real, x_rec)
    out = combined_generator_objective(parts, weights, terms)
    _finite("generator objective", out.total, p.step)
    opt = p.optimizers["theta"]
    opt.zero_grad(set_to_none=True)
    out.total.backward()
    opt.step()
    _set_trainable(p.beta_x, True)
    _set_trainable(p.beta_w, True)

    if "g_x" in terms:
        fake = state.pools["x"].query_batch(x_fake.detach())
        d_x = lsgan_discriminator_loss(discriminate(batch.x_real, p.beta_x), discriminate(fake, p.beta_x))
        _finite("d_x", d_x, p.step)
        p.optimizers["beta_x"].zero_grad(set_to_none=True)
        d_x.backward()
        p.optimizers["beta_x"].step()
        out.d_x = d_x
    if "g_w" in terms:
        fake = state.pools["w"].query_batch(w_fake.detach())
        d_w = lsgan_discriminator_loss(discriminate(batch.w, p.beta_w), discriminate(fake, p.beta_w))
        _finite("d_w", d_w, p.step)
        p.optimizers["beta_w"].zero_grad(set_to_none=True)
        d_w.backward()
        p.optimizers["beta_w"].step()
        out.d_w = d_w
    p.step += 1
    return out.detached()


class SplitSampler:
    """Seeded, stateless ordering: item ``k`` of a split depends only on (seed, k).

    Each split is shuffled afresh every pass; when splits differ in size the
    shorter one simply wraps more often, with its own permutation stream.
    """

    def __init__(self, seed: int, stream: int, n: int):
        if n < 1:
            raise ValueError("cannot sample from an empty split")
        self.seed, self.stream, self.n = seed, stream, n
        self._cache: dict = {}

    def __getitem__(self, k: int) -> int:
        cycle, pos = divmod(k, self.n)
        perm = self._cache.get(cycle)
        if perm is None:
            perm = np.random.default_rng([self.seed, self.stream, cycle]).permutation(self.n)
            self._cache = {cycle: perm}
        return int(perm[pos])


class TrainingData:
    """R-train (x*, y, mask) and S-train (w) frames as in-memory tensors."""

    def __init__(self, manifest: DatasetManifest, spec: AblationSpec):
        r = manifest.split("R-train")
        s = manifest.split("S-train")
        needs_r = bool(spec.data_needs & {"x*", "y"})
        if needs_r and not r:
            raise ValueError("manifest has no R-train entries")
        if "w" in spec.data_needs and not s:
            raise ValueError("manifest has no S-train entries")

        def stack(entries, role):
            return torch.from_numpy(np.stack([manifest.load(e, role) for e in entries]))[:, None]

        self.x_real = stack(r, "radar") if r else None
        self.y = stack(r, "partial") if r and "y" in spec.data_needs else None
        self.y_mask = stack(r, "elevation_mask") if r and "y" in spec.data_needs else None
        self.w = stack(s, "elevation") if s and "w" in spec.data_needs else None
        self.spec = spec

    def batch(self, samplers: dict, step: int, batch_size: int) -> Batch:
        ks = range(step * batch_size, (step + 1) * batch_size)
        b = Batch()
        if self.x_real is not None:
            idx = [samplers["R"][k] for k in ks]
            b.x_real = self.x_real[idx]
            if self.y is not None:
                b.y, b.y_mask = self.y[idx], self.y_mask[idx]
        if self.w is not None:
            b.w = self.w[[samplers["S"][k] for k in ks]]
        return b


METRIC_HEADER = ("step",) + BREAKDOWN_FIELDS


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _ckpt_payload(state: TrainState, spec: AblationSpec) -> dict:
    return {
        "params": state.params.state_dict(),
        "pools": {k: p.state_dict() for k, p in state.pools.items()},
        "noise": state.noise.get_state(),
        "train_config": state.config.to_dict(),
        "preset": spec.name,
    }


def save_train_checkpoint(out_dir: Path, state: TrainState, spec: AblationSpec) -> Path:
    step = state.params.step
    sidecar = {
        "step": step,
        "preset": spec.name,
        "active_terms": sorted(spec.active_terms),
        "forward_input": spec.forward_input,
        "train_config": state.config.to_dict(),
        "model_configs": state.params.configs.to_dict(),
        "kappa_policy": KAPPA_POLICY,
    }
    return save_checkpoint(out_dir / f"ckpt_{step}.bin", _ckpt_payload(state, spec), sidecar)


def restore_train_state(path, config: Optional[TrainConfig] = None) -> tuple[TrainState, dict]:
    payload, meta = load_checkpoint(path)
    stored = TrainConfig(**payload["train_config"])
    configs = ModelConfigs.from_dict(payload["params"]["configs"])
    state = new_train_state(configs, config or stored)
    state.params.load_state_dict(payload["params"])
    for k, pool in state.pools.items():
        pool.load_state_dict(payload["pools"][k])
    state.noise.set_state(payload["noise"])
    return state, meta


def load_sensor(path) -> ModelParameters:
    """Trained parameters from a checkpoint, for inference."""
    payload, _ = load_checkpoint(path)
    configs = ModelConfigs.from_dict(payload["params"]["configs"])
    params = init_parameters(configs, 0)
    for g in ("theta_x", "theta_w", "beta_x", "beta_w", "alpha"):
        params.group(g).load_state_dict(payload["params"]["groups"][g])
    params.step = payload["params"]["step"]
    return params


def latest_checkpoint(out_dir: Path) -> Optional[Path]:
    found = []
    for p in Path(out_dir).glob("ckpt_*.bin"):
        try:
            found.append((int(p.stem.split("_", 1)[1]), p))
        except ValueError:
            continue
    return max(found)[1] if found else None


def _resume_compatible(stored: dict, config: TrainConfig) -> bool:
    a, b = dict(stored), config.to_dict()
    a.pop("steps", None)
    b.pop("steps", None)
    return a == b


def run_training(config: TrainConfig, spec: AblationSpec, manifest: DatasetManifest, out_dir,
                 configs: ModelConfigs, resume: bool = True, progress: bool = False) -> dict:
    """Train for ``config.steps`` steps, checkpointing and logging every step's losses.

    With ``resume`` the latest ``ckpt_*.bin`` in ``out_dir`` is continued;
    the metrics CSV is truncated to the checkpoint step so a resumed run is
    bit-identical to an uninterrupted one.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if configs.grid != manifest.grid:
        raise ValueError("model grid does not match the dataset grid")
    metrics_path = out_dir / "metrics.csv"
    state = None
    ckpt = latest_checkpoint(out_dir) if resume else None
    if ckpt is not None:
        _, meta = load_checkpoint(ckpt)  # raises CorruptCheckpoint
        if meta.get("preset") != spec.name or not _resume_compatible(meta["train_config"], config):
            raise CorruptCheckpoint(f"{ckpt}: written by an incompatible run configuration")
        state, _ = restore_train_state(ckpt, config)
        logger.info("resuming from %s at step %d", ckpt, state.step)
    if state is None:
        state = new_train_state(configs, config)
    rows = []
    if state.step and metrics_path.exists():
        with open(metrics_path, newline="") as f:
            rows = [r for r in csv.reader(f)][1:]
        rows = [r for r in rows if int(r[0]) < state.step]
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_HEADER)
        writer.writerows(rows)

    data = TrainingData(manifest, spec)
    samplers = {}
    if data.x_real is not None:
        samplers["R"] = SplitSampler(config.seed, 1, data.x_real.shape[0])
    if data.w is not None:
        samplers["S"] = SplitSampler(config.seed, 2, data.w.shape[0])
    written = []
    with open(metrics_path, "a", newline="") as f:
        writer = csv.writer(f)
        while state.step < config.steps:
            step = state.step
            breakdown = train_step(state, data.batch(samplers, step, config.batch_size), spec, config.weights)
            writer.writerow([step] + [_fmt(getattr(breakdown, k)) for k in BREAKDOWN_FIELDS])
            if state.step % config.checkpoint_every == 0 or state.step == config.steps:
                f.flush()
                written.append(save_train_checkpoint(out_dir, state, spec))
            if progress and state.step % 100 == 0:
                logger.info("step %d total %.4f", state.step, breakdown.total)
    final = out_dir / f"ckpt_{state.step}.bin"
    return {"checkpoint": final, "metrics": metrics_path, "checkpoints": written, "state": state}


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(f)]
