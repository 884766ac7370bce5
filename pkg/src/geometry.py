import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InvalidInputError
from .grid import VoxelGrid
from .schema import SetupConfig

logger = logging.getLogger(__name__)

Vec3 = tuple[float, float, float]

UP = np.array([0.0, 0.0, 1.0])

# AirMSPI PODEX step-and-stare view angles, degrees off-nadir along-track
PODEX_ANGLES = (
    -65.0, -62.0, -58.0, -54.0, -50.0, -44.0, -38.0, -30.0, -21.0, -11.0,
    0.0,
    11.0, 21.0, 30.0, 38.0, 44.0, 50.0, 54.0, 58.0, 62.0, 65.0,
)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def heading_vector(heading_deg: float) -> np.ndarray:
    """Horizontal unit vector for a heading in degrees clockwise from North."""
    h = math.radians(heading_deg)
    return np.array([math.sin(h), math.cos(h), 0.0])


def sun_direction(zenith: float, azimuth: float) -> np.ndarray:
    """Unit vector pointing toward the sun; angles in radians, azimuth clockwise from North."""
    return np.array(
        [
            math.sin(zenith) * math.sin(azimuth),
            math.sin(zenith) * math.cos(azimuth),
            math.cos(zenith),
        ]
    )


class Camera(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["perspective", "pushbroom"] = "perspective"
    camera_id: int = 0
    # position at the epoch time, meters
    position: Vec3
    forward: Vec3
    up: Vec3
    right: Vec3
    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    # angular pixel pitch, radians
    pitch: float = Field(gt=0)

    # pushbroom trajectory: the position moves with velocity, one image line per line_period
    velocity: Vec3 = (0.0, 0.0, 0.0)
    line_period: float = 0.0
    epoch_time: float = 0.0

    @model_validator(mode="after")
    def _check_orientation(self):
        basis = np.array([self.forward, self.up, self.right], dtype=float)
        if not np.allclose(basis @ basis.T, np.eye(3), rtol=0.0, atol=1e-9):
            raise ValueError("camera orientation (forward, up, right) must be orthonormal")
        return self

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.asarray(self.forward), np.asarray(self.up), np.asarray(self.right)

    def pixel_time(self, row: float) -> float:
        """Acquisition time of an image row (pushbroom lines are sequential)."""
        if self.kind == "pushbroom":
            return self.epoch_time + (row - (self.rows - 1) / 2.0) * self.line_period
        return self.epoch_time

    def origin_at(self, t: float) -> np.ndarray:
        position = np.asarray(self.position, dtype=float)
        if self.kind == "pushbroom":
            return position + np.asarray(self.velocity) * (t - self.epoch_time)
        return position


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


class ViewEpoch(BaseModel):
    model_config = ConfigDict(frozen=True)

    time: float
    cameras: tuple[Camera, ...] = Field(min_length=1)
    # toward the sun
    sun_direction: Vec3

    @model_validator(mode="after")
    def _check_sun(self):
        if abs(math.hypot(*self.sun_direction) - 1.0) > 1e-12:
            raise ValueError("sun_direction must be a unit vector")
        return self

    @property
    def sun_zenith(self) -> float:
        return math.acos(max(-1.0, min(1.0, self.sun_direction[2])))


class ViewEpochs(BaseModel):
    """JSON document holding the view epochs of one acquisition."""

    epochs: list[ViewEpoch]


def look_at(position, target, along_track) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal (forward, up, right) with right perpendicular to the along-track direction."""
    forward = _unit(np.asarray(target, dtype=float) - np.asarray(position, dtype=float))
    right = np.cross(forward, along_track)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(forward, [1.0, 0.0, 0.0])
    right = _unit(right)
    up = np.cross(right, forward)
    return forward, _unit(up), right


def make_camera(
    position,
    target,
    along_track,
    rows: int,
    cols: int,
    pitch: float,
    camera_id: int = 0,
    kind: Literal["perspective", "pushbroom"] = "perspective",
    velocity=(0.0, 0.0, 0.0),
    line_period: float = 0.0,
    epoch_time: float = 0.0,
) -> Camera:
    forward, up, right = look_at(position, target, along_track)
    return Camera(
        kind=kind,
        camera_id=camera_id,
        position=tuple(float(v) for v in position),
        forward=tuple(forward),
        up=tuple(up),
        right=tuple(right),
        rows=rows,
        cols=cols,
        pitch=pitch,
        velocity=tuple(float(v) for v in velocity),
        line_period=line_period,
        epoch_time=epoch_time,
    )


def fit_image_size(grid: VoxelGrid, position, pitch: float, margin: int = 2) -> int:
    """Smallest odd square image size whose field of view covers the grid box."""
    corners = np.array(
        [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float
    )
    corners = grid.lower + corners * (grid.upper - grid.lower)
    forward = _unit(grid.center - np.asarray(position, dtype=float))
    to_corner = _unit(corners - np.asarray(position, dtype=float))
    half_angle = float(np.max(np.arccos(np.clip(to_corner @ forward, -1.0, 1.0))))
    half = int(math.ceil(half_angle / pitch)) + margin
    return 2 * half + 1


@dataclass(frozen=True)
class SunPath:
    """Sun angles interpolated linearly in time between two endpoints (radians)."""

    zenith_start: float
    zenith_end: float
    azimuth_start: float
    azimuth_end: float
    t_start: float = 0.0
    t_end: float = 0.0

    def direction(self, t: float) -> np.ndarray:
        span = self.t_end - self.t_start
        f = 0.0 if span <= 0 else min(1.0, max(0.0, (t - self.t_start) / span))
        zenith = self.zenith_start + f * (self.zenith_end - self.zenith_start)
        azimuth = self.azimuth_start + f * (self.azimuth_end - self.azimuth_start)
        return sun_direction(zenith, azimuth)


def make_orbit_epochs(
    n_sats: int,
    altitude: float,
    arc_spacing: float,
    speed: float,
    interval: float,
    n_epochs: int,
    target,
    heading: float = 0.0,
    gsd: float = 10.0,
    image_size: int | None = None,
    grid: VoxelGrid | None = None,
    sun: SunPath | None = None,
) -> list[ViewEpoch]:
    """Satellites following one another along an arc of radius `altitude` around the target.

    A satellite's angle from nadir is its arc position divided by the altitude;
    at mid-time the formation is symmetric around nadir.
    """
    if n_sats < 1 or n_epochs < 1:
        raise InvalidInputError("need at least one satellite and one epoch")
    if not (altitude > 0 and arc_spacing > 0 and speed >= 0 and interval >= 0):
        raise InvalidInputError("orbit magnitudes must be positive")

    target = np.asarray(target, dtype=float)
    along = heading_vector(heading)
    pitch = gsd / altitude
    times = [k * interval for k in range(n_epochs)]
    t_mid = 0.5 * (times[0] + times[-1])
    if sun is None:
        sun = SunPath(math.radians(30.0), math.radians(30.0), math.radians(180.0), math.radians(180.0))

    epochs = []
    for t in times:
        cameras = []
        for i in range(n_sats):
            arc = (i - (n_sats - 1) / 2.0) * arc_spacing + speed * (t - t_mid)
            phi = arc / altitude
            position = target + altitude * (math.sin(phi) * along + math.cos(phi) * UP)
            size = image_size
            if size is None:
                size = fit_image_size(grid, position, pitch) if grid is not None else 33
            cameras.append(make_camera(position, target, along, size, size, pitch, camera_id=i, epoch_time=t))
        epochs.append(ViewEpoch(time=t, cameras=tuple(cameras), sun_direction=tuple(sun.direction(t))))
    return epochs


def make_pushbroom_epochs(
    angles=PODEX_ANGLES,
    altitude: float = 20000.0,
    interval: float = 20.0,
    heading: float = 154.0,
    target=(0.0, 0.0, 0.0),
    speed: float = 200.0,
    gsd: float = 10.0,
    line_period: float | None = None,
    image_size: int | None = None,
    grid: VoxelGrid | None = None,
    sun: SunPath | None = None,
) -> list[ViewEpoch]:
    """One sequential step-and-stare pushbroom view per angle (degrees off-nadir, along-track)."""
    angles = list(angles)
    if any(not -90.0 < a < 90.0 for a in angles):
        raise InvalidInputError("pushbroom angles must lie in (-90, 90) degrees")
    target = np.asarray(target, dtype=float)
    along = heading_vector(heading)
    velocity = speed * along
    pitch = gsd / altitude
    if sun is None:
        sun = SunPath(math.radians(30.0), math.radians(30.0), math.radians(180.0), math.radians(180.0))

    epochs = []
    for k, angle in enumerate(angles):
        t = k * interval
        theta = math.radians(angle)
        # positive angles look forward along the track, so the aircraft is behind the target
        position = target - altitude * math.tan(theta) * along + altitude * UP
        slant = altitude / math.cos(theta)
        size = image_size
        if size is None:
            size = fit_image_size(grid, position, pitch) if grid is not None else 33
        period = line_period
        if period is None:
            # one ground footprint per line
            period = (pitch * slant / math.cos(theta)) / speed if speed > 0 else 0.0
        camera = make_camera(
            position,
            target,
            along,
            size,
            size,
            pitch,
            camera_id=0,
            kind="pushbroom",
            velocity=velocity,
            line_period=period,
            epoch_time=t,
        )
        epochs.append(ViewEpoch(time=t, cameras=(camera,), sun_direction=tuple(sun.direction(t))))
    return epochs


def make_baseline_epoch(epochs: list[ViewEpoch], time: float | None = None) -> ViewEpoch:
    """All viewpoints of an acquisition imaging simultaneously at one time (default mid-time)."""
    if time is None:
        time = 0.5 * (epochs[0].time + epochs[-1].time)
    cameras = []
    for epoch in epochs:
        for camera in epoch.cameras:
            cameras.append(
                camera.model_copy(update={"camera_id": len(cameras), "epoch_time": time})
            )
    mid = min(epochs, key=lambda e: abs(e.time - time))
    return ViewEpoch(time=time, cameras=tuple(cameras), sun_direction=mid.sun_direction)


def _pixel_direction(camera: Camera, row: float, col: float) -> np.ndarray:
    forward, up, right = camera.basis()
    if camera.kind == "pushbroom":
        row = (camera.rows - 1) / 2.0
    a_col = (col - (camera.cols - 1) / 2.0) * camera.pitch
    a_row = (row - (camera.rows - 1) / 2.0) * camera.pitch
    d = forward + math.tan(a_col) * right - math.tan(a_row) * up
    return d / np.linalg.norm(d)


def ray_through(camera: Camera, row: float, col: float, t: float | None = None) -> Ray:
    """Ray through fractional pixel coordinates (no bounds check)."""
    if t is None:
        t = camera.pixel_time(row)
    return Ray(origin=camera.origin_at(t), direction=_pixel_direction(camera, row, col))


def ray_for_pixel(camera: Camera, row: int, col: int, t: float | None = None) -> Ray:
    if not (0 <= row < camera.rows and 0 <= col < camera.cols):
        raise InvalidInputError(
            f"pixel ({row}, {col}) outside {camera.rows}x{camera.cols} image"
        )
    return ray_through(camera, row, col, t)


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions of every pixel, each shaped (rows, cols, 3)."""
    forward, up, right = camera.basis()
    a_col = (np.arange(camera.cols) - (camera.cols - 1) / 2.0) * camera.pitch
    a_row = (np.arange(camera.rows) - (camera.rows - 1) / 2.0) * camera.pitch
    if camera.kind == "pushbroom":
        a_row = np.zeros_like(a_row)
    d = (
        forward[None, None, :]
        + np.tan(a_col)[None, :, None] * right[None, None, :]
        - np.tan(a_row)[:, None, None] * up[None, None, :]
    )
    directions = d / np.linalg.norm(d, axis=-1, keepdims=True)
    row_origins = np.stack([camera.origin_at(camera.pixel_time(r)) for r in range(camera.rows)])
    origins = np.broadcast_to(row_origins[:, None, :], directions.shape).copy()
    return origins, directions


def project_point(camera: Camera, point, t: float | None = None) -> tuple[float, float]:
    """Fractional (row, col) at which a world point appears in a perspective camera."""
    t = camera.epoch_time if t is None else t
    forward, up, right = camera.basis()
    v = np.asarray(point, dtype=float) - camera.origin_at(t)
    depth = float(v @ forward)
    if depth <= 0:
        raise InvalidInputError("point is behind the camera")
    col = math.atan(float(v @ right) / depth) / camera.pitch + (camera.cols - 1) / 2.0
    row = -math.atan(float(v @ up) / depth) / camera.pitch + (camera.rows - 1) / 2.0
    return row, col


def angular_extent(epochs: list[ViewEpoch], target) -> float:
    """Largest angle (radians) between any two camera-to-target directions."""
    if len(epochs) == 0:
        raise InvalidInputError("need at least one epoch")
    target = np.asarray(target, dtype=float)
    directions = [
        _unit(target - np.asarray(camera.position)) for epoch in epochs for camera in epoch.cameras
    ]
    extent = 0.0
    for a, b in combinations(directions, 2):
        extent = max(extent, math.acos(max(-1.0, min(1.0, float(a @ b)))))
    return extent


def view_zenith(camera: Camera, target, heading: float = 0.0) -> float:
    """Signed view zenith (radians) at the target; positive when the camera is ahead along `heading`."""
    d = _unit(np.asarray(camera.position) - np.asarray(target, dtype=float))
    horizontal = math.hypot(d[0], d[1])
    sign = 1.0 if float(d @ heading_vector(heading)) >= 0 else -1.0
    return sign * math.atan2(horizontal, d[2])


def build_epochs(setup: SetupConfig, grid: VoxelGrid) -> list[ViewEpoch]:
    """View epochs of a configured setup, aimed at the grid center."""
    scale = setup.desk_scale
    target = grid.center
    if setup.kind == "pushbroom":
        angles = setup.angles if setup.angles is not None else PODEX_ANGLES
        t_end = (len(angles) - 1) * setup.interval
    else:
        t_end = (setup.n_epochs - 1) * setup.interval
    sun = SunPath(
        math.radians(setup.sun_zenith_start),
        math.radians(setup.sun_zenith_end),
        math.radians(setup.sun_azimuth_start),
        math.radians(setup.sun_azimuth_end),
        t_start=0.0,
        t_end=t_end,
    )

    if setup.kind == "pushbroom":
        epochs = make_pushbroom_epochs(
            angles=angles,
            altitude=setup.altitude * scale,
            interval=setup.interval,
            heading=setup.heading,
            target=target,
            speed=setup.speed * scale,
            gsd=setup.gsd,
            line_period=setup.line_period,
            image_size=setup.image_size,
            grid=grid,
            sun=sun,
        )
        logger.info("Built %d pushbroom view epochs", len(epochs))
        return epochs
    epochs = make_orbit_epochs(
        n_sats=setup.n_sats,
        altitude=setup.altitude * scale,
        arc_spacing=setup.arc_spacing * scale,
        speed=setup.speed * scale,
        interval=setup.interval,
        n_epochs=setup.n_epochs,
        target=target,
        heading=setup.heading,
        gsd=setup.gsd,
        image_size=setup.image_size,
        grid=grid,
        sun=sun,
    )
    logger.info("Built %d orbit view epochs of %d cameras", len(epochs), setup.n_sats)
    if setup.kind == "baseline":
        return [make_baseline_epoch(epochs)]
    return epochs


def make_fan_epoch(
    extent: float,
    n_views: int,
    altitude: float,
    target,
    heading: float = 0.0,
    gsd: float = 10.0,
    image_size: int | None = None,
    grid: VoxelGrid | None = None,
    sun=(0.0, 0.0, 1.0),
    time: float = 0.0,
) -> ViewEpoch:
    """n_views simultaneous cameras spread evenly over `extent` radians, symmetric about nadir."""
    if n_views < 1:
        raise InvalidInputError("need at least one view")
    if not 0 <= extent < math.pi:
        raise InvalidInputError(f"angular extent must be in [0, pi), got {extent}")
    target = np.asarray(target, dtype=float)
    along = heading_vector(heading)
    pitch = gsd / altitude
    angles = np.linspace(-extent / 2.0, extent / 2.0, n_views) if n_views > 1 else np.zeros(1)
    cameras = []
    for i, phi in enumerate(angles):
        position = target + altitude * (math.sin(phi) * along + math.cos(phi) * UP)
        size = image_size
        if size is None:
            size = fit_image_size(grid, position, pitch) if grid is not None else 33
        cameras.append(make_camera(position, target, along, size, size, pitch, camera_id=i, epoch_time=time))
    return ViewEpoch(time=time, cameras=tuple(cameras), sun_direction=tuple(_unit(sun)))
