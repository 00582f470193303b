"""Networks for the learned sensor model and the downstream segmenter.

All convolutions pad circularly along azimuth (dim 2) and with zeros along
range (dim 3). Tensors are ``(N, C, num_azimuths, num_range_bins)``.
Generators and discriminators normalise with batch statistics only
(``track_running_stats=False``), so each is a pure function of its inputs
and parameters; with the batch size of 1 used in training this is the same
as instance normalisation.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .polargrid import PolarGridSpec

FREE, OCCUPIED, UNKNOWN = 0, 1, 2
CLASS_NAMES = ("free", "occupied", "unknown")


@dataclass
class GeneratorConfig:
    residual_blocks: int = 9
    base_channels: int = 64
    downsampling_stages: int = 2
    normalization: str = "batch"
    output_activation: str = "tanh"

    def __post_init__(self):
        if min(self.residual_blocks, self.base_channels, self.downsampling_stages) < 1:
            raise ValueError("generator counts must be >= 1")
        if self.normalization != "batch" or self.output_activation != "tanh":
            raise ValueError("only batch normalisation with a tanh head is supported")


@dataclass
class DiscriminatorConfig:
    layers: int = 3
    base_channels: int = 64
    patch_output: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.base_channels < 1:
            raise ValueError("discriminator counts must be >= 1")
        if not self.patch_output:
            raise ValueError("discriminators always emit patch score grids")

    def output_shape(self, shape: tuple[int, int]) -> tuple[int, int]:
        """Spatial size of the score grid: each strided layer halves, rounding up."""
        a, r = shape
        for _ in range(self.layers):
            a, r = math.ceil(a / 2), math.ceil(r / 2)
        return a, r


@dataclass
class SegmenterConfig:
    levels: int = 6
    initial_features: int = 8
    classes: int = 3
    pad_to_multiple: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.initial_features < 1:
            raise ValueError("segmenter counts must be >= 1")
        if self.classes != 3:
            raise ValueError("the segmenter predicts exactly free / occupied / unknown")


class PolarConv2d(nn.Module):
    """Conv2d with circular azimuth padding and zero range padding.

    Padding is ``(k - 1) // 2`` before and ``k // 2`` after on each axis, so
    stride 1 preserves size and stride 2 gives ``ceil(n / 2)``.
    """

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding=0, bias=bias)
        self.before, self.after = (kernel_size - 1) // 2, kernel_size // 2

    def forward(self, x):
        a, b = self.before, self.after
        if a or b:
            n = x.shape[2]
            idx = torch.arange(-a, n + b, device=x.device) % n
            x = F.pad(x.index_select(2, idx), (a, b, 0, 0))
        return self.conv(x)


def _norm(ch):
    return nn.BatchNorm2d(ch, track_running_stats=False)


def conv_bn_relu(in_ch, out_ch, k, stride=1):
    return [PolarConv2d(in_ch, out_ch, k, stride), _norm(out_ch), nn.ReLU(inplace=True)]


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(*conv_bn_relu(ch, ch, 3), PolarConv2d(ch, ch, 3), _norm(ch))

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Two input channels (state, noise) -> one tanh output channel."""

    def __init__(self, cfg: GeneratorConfig, in_channels: int = 2):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers = conv_bn_relu(in_channels, c, 7)
        for _ in range(cfg.downsampling_stages):
            layers += conv_bn_relu(c, 2 * c, 3, stride=2)
            c *= 2
        layers += [ResidualBlock(c) for _ in range(cfg.residual_blocks)]
        for _ in range(cfg.downsampling_stages):
            layers += [nn.Upsample(scale_factor=2, mode="nearest")] + conv_bn_relu(c, c // 2, 3)
            c //= 2
        layers += [PolarConv2d(c, 1, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)
        self.multiple = 2 ** cfg.downsampling_stages

    def forward(self, x):
        a, r = x.shape[-2:]
        pa, pr = (-a) % self.multiple, (-r) % self.multiple
        if pa or pr:
            x = F.pad(x, (0, pr, 0, pa))
        return self.net(x)[..., :a, :r]


class PatchDiscriminator(nn.Module):
    """Unbounded per-patch scores; no output squashing."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        c = cfg.base_channels
        layers = [PolarConv2d(1, c, 4, stride=2), nn.LeakyReLU(0.2, inplace=True)]
        for _ in range(cfg.layers - 1):
            nxt = min(2 * c, 8 * cfg.base_channels)
            layers += [PolarConv2d(c, nxt, 4, stride=2), _norm(nxt), nn.LeakyReLU(0.2, inplace=True)]
            c = nxt
        layers += [PolarConv2d(c, 1, 3)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class _SegBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.body = nn.Sequential(
            PolarConv2d(in_ch, out_ch, 3), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
            PolarConv2d(out_ch, out_ch, 3), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class UNetSegmenter(nn.Module):
    """U-Net over polar radar frames, features doubling per level."""

    def __init__(self, cfg: SegmenterConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        feats = [cfg.initial_features * 2**i for i in range(cfg.levels)]
        self.down = nn.ModuleList()
        ch = in_channels
        for f in feats:
            self.down.append(_SegBlock(ch, f))
            ch = f
        self.up = nn.ModuleList()
        self.reduce = nn.ModuleList()
        for f in reversed(feats[:-1]):
            self.reduce.append(PolarConv2d(ch, f, 3))
            self.up.append(_SegBlock(2 * f, f))
            ch = f
        self.head = nn.Conv2d(ch, cfg.classes, 1)
        self.multiple = 2 ** (cfg.levels - 1)

    def forward(self, x):
        a, r = x.shape[-2:]
        pa, pr = (-a) % self.multiple, (-r) % self.multiple
        if pa or pr:
            if not self.cfg.pad_to_multiple:
                raise ValueError(f"grid {a}x{r} is not divisible by {self.multiple} and padding is disabled")
            x = F.pad(x, (0, pr, 0, pa))
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for reduce, block in zip(self.reduce, self.up):
            x = reduce(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = block(torch.cat([skips.pop(), x], dim=1))
        return self.head(x)[..., :a, :r]


def _check_pair(state: torch.Tensor, noise: torch.Tensor):
    if state.dim() != 4 or state.shape[1] != 1:
        raise ValueError("expected a (N, 1, azimuths, ranges) tensor")
    if noise.shape != state.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match input {tuple(state.shape)}")


def forward_generator(w: torch.Tensor, eps: torch.Tensor, theta_x: ResnetGenerator) -> torch.Tensor:
    """Sample radar frames: elevation and noise stacked as a 2-channel polar tensor."""
    _check_pair(w, eps)
    return theta_x(torch.cat([w, eps], dim=1))


def backward_generator(x: torch.Tensor, kappa: torch.Tensor, theta_w: ResnetGenerator) -> torch.Tensor:
    _check_pair(x, kappa)
    return theta_w(torch.cat([x, kappa], dim=1))


def discriminate(t: torch.Tensor, beta: PatchDiscriminator) -> torch.Tensor:
    if t.dim() != 4 or t.shape[1] != 1:
        raise ValueError("discriminators take single-channel (N, 1, azimuths, ranges) input")
    return beta(t)


def segment(x: torch.Tensor, alpha: UNetSegmenter) -> torch.Tensor:
    """Per-cell class logits, shape ``(N, 3, azimuths, ranges)``."""
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError("segmenter takes single-channel (N, 1, azimuths, ranges) input")
    return alpha(x)


def predict_classes(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lower class
    return torch.argmax(logits, dim=1)


def sample_noise(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=dtype)


@dataclass
class ModelConfigs:
    grid: PolarGridSpec = field(default_factory=PolarGridSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "generator": asdict(self.generator),
            "discriminator": asdict(self.discriminator),
            "segmenter": asdict(self.segmenter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfigs":
        return cls(
            PolarGridSpec.from_dict(d["grid"]),
            GeneratorConfig(**d["generator"]),
            DiscriminatorConfig(**d["discriminator"]),
            SegmenterConfig(**d["segmenter"]),
        )


GROUPS = ("theta_x", "theta_w", "beta_x", "beta_w", "alpha")


@dataclass
class ModelParameters:
    """The five disjoint parameter groups plus their optimizers and step count."""

    configs: ModelConfigs
    theta_x: ResnetGenerator
    theta_w: ResnetGenerator
    beta_x: PatchDiscriminator
    beta_w: PatchDiscriminator
    alpha: UNetSegmenter
    optimizers: dict = field(default_factory=dict)
    step: int = 0

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def parameter_count(self, name: str) -> int:
        return sum(p.numel() for p in self.group(name).parameters())

    def state_dict(self) -> dict:
        return {
            "configs": self.configs.to_dict(),
            "groups": {g: self.group(g).state_dict() for g in GROUPS},
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "step": self.step,
        }

    def load_state_dict(self, state: dict):
        for g in GROUPS:
            self.group(g).load_state_dict(state["groups"][g])
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        self.step = int(state["step"])


def init_parameters(configs: ModelConfigs, seed: int) -> ModelParameters:
    """Deterministically build all five networks from ``seed``.

    Weights follow the usual GAN initialisation N(0, 0.02) for convolutions
    and N(1, 0.02) for normalisation scales. Optimizers are attached by the
    trainer.
    """
    gen = torch.Generator().manual_seed(int(seed))

    def init(module: nn.Module):
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                    if m.bias is not None:
                        m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                with torch.no_grad():
                    m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * 0.02)
                    m.bias.zero_()
        return module

    return ModelParameters(
        configs=configs,
        theta_x=init(ResnetGenerator(configs.generator)),
        theta_w=init(ResnetGenerator(configs.generator)),
        beta_x=init(PatchDiscriminator(configs.discriminator)),
        beta_w=init(PatchDiscriminator(configs.discriminator)),
        alpha=init(UNetSegmenter(configs.segmenter)),
    )


class CorruptCheckpoint(RuntimeError):
    pass


def save_checkpoint(path, payload: dict, sidecar: dict) -> Path:
    """Write ``payload`` with torch.save plus a JSON sidecar carrying its sha256."""
    path = Path(path)
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    tmp = path.with_suffix(".bin.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    meta = dict(sidecar, sha256=hashlib.sha256(data).hexdigest(), bytes=len(data))
    side = path.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    side = path.with_suffix(".json")
    if not path.is_file() or not side.is_file():
        raise CorruptCheckpoint(f"{path}: checkpoint or sidecar missing")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{side}: unreadable sidecar") from exc
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != meta.get("sha256"):
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    payload = torch.load(io.BytesIO(data), weights_only=False)
    return payload, meta
