"""Parameter sweeps: recovery quality against the kernel width and against the viewing extent."""

import logging
import math
from dataclasses import dataclass
from typing import Literal

import pandas as pd
from tqdm import tqdm

from .app import app
from .forward import ImageSet
from .geometry import ViewEpoch, make_fan_epoch, sun_direction
from .grid import CarveMask, FieldSequence
from .metrics import mass_bias, per_state_metrics, rel_error
from .recon import reconstruct_4d, reconstruct_static
from .schema import OpticsModel, ReconConfig, SensorModel
from .sensor import acquire
from .temporal import Sigma, format_sigma

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepPoint:
    kind: Literal["sigma", "extent"]
    # sigma in seconds (or "inf"), or the angular extent in degrees
    value: Sigma
    truth: FieldSequence
    optics: OpticsModel
    recon: ReconConfig
    gain: float | None = None

    # sigma sweep: one shared acquisition
    epochs: tuple[ViewEpoch, ...] = ()
    data: tuple[ImageSet, ...] = ()
    mask: CarveMask | None = None

    # extent sweep: simultaneous views of the first truth state
    n_views: int = 9
    altitude: float = 5000.0
    gsd: float = 10.0
    image_size: int | None = None
    sensor: SensorModel | None = None


def _sigma_row(point: SweepPoint) -> dict:
    grid = point.truth.grid
    recon = point.recon.model_copy(update={"sigma": point.value})
    states, _ = reconstruct_4d(list(point.data), list(point.epochs), recon, point.optics, grid, point.gain, point.mask)
    frame = per_state_metrics(point.truth.resample(states.times), states)
    row = {
        "sigma": format_sigma(point.value),
        "epsilon": float(frame["epsilon_t"].mean()),
        "delta": float(frame["delta_t"].mean()),
    }
    for i, (epsilon, delta) in enumerate(zip(frame["epsilon_t"], frame["delta_t"])):
        row[f"epsilon_{i}"] = float(epsilon)
        row[f"delta_{i}"] = float(delta)
    return row


def _extent_row(point: SweepPoint) -> dict:
    grid = point.truth.grid
    static = point.truth.states[0]
    epoch = make_fan_epoch(
        math.radians(float(point.value)),
        point.n_views,
        point.altitude,
        grid.center,
        gsd=point.gsd,
        image_size=point.image_size,
        grid=grid,
        sun=sun_direction(math.radians(30.0), math.radians(180.0)),
    )
    data = acquire(FieldSequence((0.0,), (static,)), [epoch], point.optics, point.sensor, point.gain)
    est = reconstruct_static(data, [epoch], point.recon, point.optics, grid, point.gain)
    return {"extent_deg": float(point.value), "epsilon": rel_error(static, est), "delta": mass_bias(static, est)}


def run_sweep_point(point: SweepPoint) -> dict:
    if point.kind == "sigma":
        return _sigma_row(point)
    return _extent_row(point)


@app.function(timeout=3600)
def sweep_point(point: SweepPoint) -> dict:
    return run_sweep_point(point)


def run_sweep(points: list[SweepPoint], remote: bool = False) -> pd.DataFrame:
    """One row per point, in input order."""
    if remote:
        with app.run():
            rows = list(sweep_point.map(points))
    else:
        rows = [run_sweep_point(point) for point in tqdm(points, desc="sweep", unit="point")]
    return pd.DataFrame(rows)
