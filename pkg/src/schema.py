import math
from typing import Any, Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from .temporal import Sigma, parse_sigma

Vec3 = tuple[float, float, float]


class OpticsModel(BaseModel):
    mode: Literal["linear", "single_scatter"] = "single_scatter"

    # Henyey-Greenstein asymmetry parameter; 0.85 approximates cloud droplets
    phase_g: float = Field(default=0.85, gt=-1.0, lt=1.0)

    single_scatter_albedo: float = Field(default=1.0, ge=0.0, le=1.0)
    surface_albedo: float = Field(default=0.04, ge=0.0, le=1.0)

    # uniform molecular extinction inside the domain, km^-1
    air_extinction: float = Field(default=0.0, ge=0.0)

    sun_irradiance: float = Field(default=1.0, ge=0.0)

    # background radiance behind the medium (linear mode only)
    background_radiance: float = Field(default=1.0, ge=0.0)

    # camera gain gamma^cam (aperture, exposure, band, quantum efficiency, optics)
    gain: float = Field(default=1.0, gt=0.0)

    # ray-march step in meters; None uses half the smallest voxel edge
    step: float | None = Field(default=None, gt=0.0)


class SensorModel(BaseModel):
    full_well: float = Field(default=200_000.0, gt=0.0)
    readout_sigma: float = Field(default=20.0, ge=0.0)
    bits: int = Field(default=9, ge=1, le=16)

    # photo-electrons per rendered intensity unit; puts a bright cloud pixel near half full well
    electrons_per_unit: float = Field(default=500_000.0, gt=0.0)

    seed: int = 0


class ReconConfig(BaseModel):
    sigma: Sigma = 20.0
    max_iters: int = Field(default=100, ge=1)

    # every hidden field starts here inside the mask
    init_value: float = 1.0
    lower_bound: float = 0.0
    upper_bound: float = 300.0

    solver: Literal["lbfgsb", "projected_gradient"] = "lbfgsb"

    # quasi-Newton memory (number of stored correction pairs)
    memory: int = Field(default=10, ge=1)

    # projected gradient: initial step alpha, Armijo constant and backtracking factor
    step_size: float = Field(default=1.0, gt=0.0)
    armijo: float = Field(default=1e-4, gt=0.0, lt=1.0)
    backtrack: float = Field(default=0.5, gt=0.0, lt=1.0)
    max_line_search: int = Field(default=30, ge=1)

    # stop when the relative cost decrease falls below this
    tolerance: float = Field(default=1e-6, ge=0.0)

    # optional CarveMask file restricting the recovered support
    mask_path: str | None = None

    @field_validator("sigma", mode="before")
    @classmethod
    def _parse_sigma(cls, value):
        return parse_sigma(value)

    @model_validator(mode="after")
    def _check_bounds(self):
        if not 0.0 <= self.lower_bound < self.upper_bound:
            raise ValueError("bounds must satisfy 0 <= lower < upper")
        if not self.lower_bound <= self.init_value <= self.upper_bound:
            raise ValueError("init_value must lie within the bounds")
        return self


class Blob(BaseModel):
    # meters
    center: Vec3
    radius: float = Field(gt=0.0)


class PhantomSpec(BaseModel):
    kind: Literal["static_blob", "translating_blob", "growing_blob", "multi_mode"] = "static_blob"

    # empty list means one blob centred in the grid
    blobs: list[Blob] = []
    # extra blobs placed at random (seeded) inside the grid
    n_random_blobs: int = Field(default=0, ge=0)

    # km^-1
    peak: float = Field(default=60.0, ge=0.0)

    # m/s (translating_blob)
    velocity: Vec3 = (0.0, 0.0, 0.0)
    # 1/s (growing_blob)
    growth_rate: float = 0.0
    # Hz (multi_mode)
    frequencies: list[float] = [0.02]
    modulation_depth: float = Field(default=0.5, ge=0.0, le=1.0)

    duration: float = Field(default=60.0, ge=0.0)
    sample_period: float = Field(default=10.0, gt=0.0)
    seed: int = 0


class SetupConfig(BaseModel):
    kind: Literal["orbit", "pushbroom", "baseline"] = "orbit"

    # orbit (Setup A / B, baseline): defaults are Setup A
    n_sats: int = Field(default=3, ge=1)
    altitude: float = Field(default=500_000.0, gt=0.0)
    arc_spacing: float = Field(default=500_000.0, gt=0.0)
    speed: float = Field(default=7_350.0, ge=0.0)
    interval: float = Field(default=10.0, ge=0.0)
    n_epochs: int = Field(default=7, ge=1)

    # pushbroom (Setup C)
    angles: list[float] | None = None
    line_period: float | None = None

    # degrees clockwise from North
    heading: float = 0.0

    # nadir ground sample distance, meters
    gsd: float = Field(default=10.0, gt=0.0)
    # None fits the image to the grid
    image_size: int | None = Field(default=None, ge=1)

    # multiplies altitude, arc spacing and speed, preserving every angle
    desk_scale: float = Field(default=1.0, gt=0.0)

    # sun trajectory over the acquisition, degrees
    sun_zenith_start: float = 30.0
    sun_zenith_end: float = 30.0
    sun_azimuth_start: float = 180.0
    sun_azimuth_end: float = 180.0


def setup_preset(name: str) -> SetupConfig:
    """Named imaging setups A (three satellites), B (two), C (airborne pushbroom) and baseline."""
    name = name.strip().upper()
    if name == "A":
        return SetupConfig()
    if name == "B":
        return SetupConfig(n_sats=2)
    if name == "C":
        return SetupConfig(kind="pushbroom", altitude=20_000.0, speed=200.0, interval=20.0, heading=154.0)
    if name == "BASELINE":
        return SetupConfig(kind="baseline")
    raise ValueError(f"unknown setup preset {name!r}")


class RunManifest(BaseModel):
    run_id: str
    command: str
    argv: list[str]

    # wall-clock fields are excluded from reproducibility checks
    created_at: str
    duration_seconds: float | None = None

    configs: dict[str, Any] = {}
    seeds: dict[str, int] = {}
    outputs: dict[str, str] = {}
    output_hashes: dict[str, str] = {}
    summary: dict[str, Any] = {}


class ShadowObservation(BaseModel):
    # cloud point and its shadow on the ground, meters
    cloud_xy: tuple[float, float]
    shadow_xy: tuple[float, float]
    # radians
    sun_zenith: float = Field(gt=0.0, lt=math.pi / 2)


class DriftEstimate(BaseModel):
    # m/s (east, north)
    velocity: tuple[float, float]
    # degrees clockwise from North
    heading: float
    # altitude of the plane the centroid rays were projected to, meters
    altitude: float
    reference_time: float

    # per-epoch camera-position shifts that register every projection onto one point
    corrections: list[Vec3] = []
    # rms distance of the projected centroids from the fitted track, meters
    residual: float = 0.0

    @property
    def speed_kmh(self) -> float:
        return math.hypot(*self.velocity) * 3.6
