"""Named configuration profiles.

``desk`` is the small, CPU-friendly setup every test and acceptance run
uses; ``paper`` carries the full-size settings and is only shape-checked.
The oracle sensor parameters below are the pinned defaults for all
reproducible numbers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from .evalkit import DownstreamConfig
from .models import DiscriminatorConfig, GeneratorConfig, ModelConfigs, SegmenterConfig
from .objectives import LossWeights
from .polargrid import PolarGridSpec
from .trainer import TrainConfig
from .worldsim import LidarSimParams, OracleSensorParams, SceneParams

PROFILE_ENV = "RADAR_SIM_PROFILE"


@dataclass
class Profile:
    name: str
    models: ModelConfigs
    train: TrainConfig
    scene: SceneParams
    oracle: OracleSensorParams
    lidar: LidarSimParams
    downstream: DownstreamConfig
    counts: dict = field(default_factory=dict)

    @property
    def grid(self) -> PolarGridSpec:
        return self.models.grid


def desk_profile() -> Profile:
    grid = PolarGridSpec(num_azimuths=64, num_range_bins=64)
    return Profile(
        name="desk",
        models=ModelConfigs(
            grid=grid,
            generator=GeneratorConfig(residual_blocks=4, base_channels=16, downsampling_stages=2),
            discriminator=DiscriminatorConfig(layers=3, base_channels=16),
            segmenter=SegmenterConfig(levels=6, initial_features=8),
        ),
        train=TrainConfig(steps=2000, checkpoint_every=500, learning_rate=5e-4, weights=LossWeights(), desk_scale=True),
        scene=SceneParams(),
        oracle=OracleSensorParams(),
        lidar=LidarSimParams(max_range=grid.max_range),
        downstream=DownstreamConfig(samples_per_scene=8),
        counts={"R-train": 64, "R-test": 16, "S-train": 64, "S-test": 16},
    )


def paper_profile() -> Profile:
    grid = PolarGridSpec()
    return Profile(
        name="paper",
        models=ModelConfigs(grid=grid, generator=GeneratorConfig(), discriminator=DiscriminatorConfig(),
                            segmenter=SegmenterConfig()),
        train=TrainConfig(),
        scene=SceneParams(),
        oracle=OracleSensorParams(),
        lidar=LidarSimParams(),
        downstream=DownstreamConfig(),
        counts={"R-train": 222420, "R-test": 23460, "S-train": 100000, "S-test": 68400},
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def get_profile(name: str | None = None) -> Profile:
    name = name or os.environ.get(PROFILE_ENV, "desk")
    try:
        return PROFILES[name]()
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
