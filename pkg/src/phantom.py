"""Procedural dynamic ground truth: Gaussian blobs that translate, grow or pulsate."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .grid import ExtinctionField, FieldSequence, VoxelGrid
from .schema import Blob, PhantomSpec
from .temporal import SpectrumReport, nyquist_period, spectrum_cutoff

logger = logging.getLogger(__name__)


def sample_times(spec: PhantomSpec) -> list[float]:
    count = int(math.floor(spec.duration / spec.sample_period + 1e-9)) + 1
    return [k * spec.sample_period for k in range(count)]


def _blobs(spec: PhantomSpec, grid: VoxelGrid, rng: np.random.Generator) -> list[Blob]:
    extent = grid.upper - grid.lower
    blobs = list(spec.blobs)
    if not blobs and spec.n_random_blobs == 0:
        blobs.append(Blob(center=tuple(grid.center), radius=float(extent.min()) / 6.0))
    for _ in range(spec.n_random_blobs):
        center = grid.lower + extent * rng.uniform(0.3, 0.7, size=3)
        radius = float(extent.min()) * rng.uniform(0.06, 0.12)
        blobs.append(Blob(center=tuple(center), radius=radius))
    return blobs


def _state(spec: PhantomSpec, blobs: list[Blob], centers: np.ndarray, t: float, phases: np.ndarray) -> np.ndarray:
    velocity = np.asarray(spec.velocity)
    values = np.zeros(centers.shape[:-1])
    for blob in blobs:
        center = np.asarray(blob.center, dtype=float)
        radius = blob.radius
        if spec.kind == "translating_blob":
            center = center + velocity * t
        elif spec.kind == "growing_blob":
            radius = radius * (1.0 + spec.growth_rate * t)
        if radius <= 0:
            continue
        d2 = ((centers - center) ** 2).sum(axis=-1)
        values += np.exp(-0.5 * d2 / radius**2)

    amplitude = spec.peak
    if spec.kind == "multi_mode" and spec.frequencies:
        f = np.asarray(spec.frequencies, dtype=float)
        modulation = np.mean(np.sin(2.0 * math.pi * f * t + phases))
        amplitude = spec.peak * (1.0 + spec.modulation_depth * modulation)

    values = amplitude * values
    # one-voxel shell of zeros around the domain
    values[[0, -1], :, :] = 0.0
    values[:, [0, -1], :] = 0.0
    values[:, :, [0, -1]] = 0.0
    return values


def generate(spec: PhantomSpec, grid: VoxelGrid) -> FieldSequence:
    logger.info("Generating phantom:\n%s", spec.model_dump_json(indent=2))
    rng = np.random.default_rng(spec.seed)
    blobs = _blobs(spec, grid, rng)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=len(spec.frequencies))
    centers = grid.voxel_centers()
    times = sample_times(spec)
    states = tuple(ExtinctionField(grid, _state(spec, blobs, centers, t, phases)) for t in times)
    return FieldSequence(tuple(times), states).to_float32()


@dataclass(frozen=True)
class BandlimitReport(SpectrumReport):
    acquisition_period: float | None
    # (2B)^-1, infinite for a static object
    nyquist_period: float
    adequate: bool


def voxel_series(seq: FieldSequence) -> np.ndarray:
    """(n_voxels, n_times) time series of every voxel."""
    return seq.stack().reshape(len(seq), -1).T


def bandlimit_check(
    seq: FieldSequence,
    fraction: float = 0.95,
    acquisition_period: float | None = None,
    window: int | None = None,
) -> BandlimitReport:
    """Temporal spectrum of a sequence and whether `acquisition_period` meets its Nyquist period."""
    times = np.asarray(seq.times)
    if len(times) < 2:
        raise InvalidInputError("need at least two states for a spectrum")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-9):
        raise InvalidInputError("spectrum needs uniformly spaced times")
    window = window or min(64, len(times))

    report = spectrum_cutoff(voxel_series(seq), float(steps[0]), window=window, fraction=fraction)
    limit = nyquist_period(report.cutoff) if report.cutoff > 0 else math.inf
    adequate = acquisition_period is None or acquisition_period <= limit
    if not adequate:
        logger.warning(
            "acquisition period %gs exceeds the Nyquist period %gs of cutoff %g Hz",
            acquisition_period,
            limit,
            report.cutoff,
        )
    return BandlimitReport(
        frequencies=report.frequencies,
        power=report.power,
        cutoff=report.cutoff,
        contained_fraction=report.contained_fraction,
        acquisition_period=acquisition_period,
        nyquist_period=limit,
        adequate=adequate,
    )
