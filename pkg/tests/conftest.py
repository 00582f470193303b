import os

import numpy as np
import pytest
import torch

from radarsim.polargrid import PolarGridSpec

torch.set_num_threads(int(os.environ.get("RADARSIM_TEST_THREADS", "1")))

# Acceptance results, printed in the terminal summary so they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_grid():
    return PolarGridSpec(num_azimuths=16, num_range_bins=32)


@pytest.fixture
def desk_grid():
    return PolarGridSpec(num_azimuths=64, num_range_bins=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_GRID = PolarGridSpec(num_azimuths=16, num_range_bins=16, range_resolution=1.5)
TINY_COUNTS = {"R-train": 6, "R-test": 4, "S-train": 6, "S-test": 2}


def tiny_models():
    from radarsim.models import DiscriminatorConfig, GeneratorConfig, ModelConfigs, SegmenterConfig

    return ModelConfigs(
        grid=TINY_GRID,
        generator=GeneratorConfig(residual_blocks=1, base_channels=4, downsampling_stages=1),
        discriminator=DiscriminatorConfig(layers=2, base_channels=4),
        segmenter=SegmenterConfig(levels=3, initial_features=4),
    )


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    from radarsim.worldsim import LidarSimParams, OracleSensorParams, SceneParams, build_datasets

    out = tmp_path_factory.mktemp("tiny_data")
    return build_datasets(TINY_COUNTS, SceneParams(), OracleSensorParams(),
                          LidarSimParams(max_range=TINY_GRID.max_range), TINY_GRID, out, seed=0)
