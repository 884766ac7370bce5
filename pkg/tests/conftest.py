import math

import numpy as np
import pytest

from src.geometry import ViewEpoch, make_camera, make_fan_epoch, sun_direction
from src.grid import ExtinctionField, VoxelGrid
from src.schema import OpticsModel


@pytest.fixture
def small_grid() -> VoxelGrid:
    return VoxelGrid(nx=4, ny=4, nz=3, dx=100.0, dy=100.0, dz=100.0)


@pytest.fixture
def linear_optics() -> OpticsModel:
    return OpticsModel(mode="linear", surface_albedo=0.0, air_extinction=0.0)


@pytest.fixture
def scatter_optics() -> OpticsModel:
    return OpticsModel(mode="single_scatter", phase_g=0.6, air_extinction=0.05, surface_albedo=0.1)


def nadir_epoch(grid: VoxelGrid, altitude: float = 2000.0, size: int = 3, pitch: float = 0.01, time: float = 0.0,
                sun=(0.0, 0.0, 1.0)) -> ViewEpoch:
    center = grid.center
    camera = make_camera(
        (center[0], center[1], altitude), (center[0], center[1], 0.0), (0.0, 1.0, 0.0), size, size, pitch,
        epoch_time=time,
    )
    return ViewEpoch(time=time, cameras=(camera,), sun_direction=tuple(sun))


def fan_epoch(grid: VoxelGrid, time: float = 0.0, n_views: int = 2, extent_deg: float = 50.0) -> ViewEpoch:
    return make_fan_epoch(
        math.radians(extent_deg),
        n_views,
        2000.0,
        grid.center,
        gsd=50.0,
        grid=grid,
        sun=sun_direction(math.radians(40.0), math.radians(120.0)),
        time=time,
    )


def random_field(grid: VoxelGrid, seed: int = 0, low: float = 0.5, high: float = 3.0) -> ExtinctionField:
    rng = np.random.default_rng(seed)
    return ExtinctionField(grid, rng.uniform(low, high, size=grid.shape))
