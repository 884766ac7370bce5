"""Scene preparation before tomography.

Cloud height comes from a shadow offset and the sun zenith. Wind drift is fit
to image centroids and folded back into the camera positions. Surface albedo
is fit to clear-sky pixels.
"""

import logging
import math

import numpy as np
from scipy import ndimage, optimize

from .errors import InvalidInputError, NumericError
from .forward import ImageSet, render_clear_sky
from .geometry import ViewEpoch, ray_through
from .grid import VoxelGrid
from .schema import DriftEstimate, OpticsModel, ShadowObservation

logger = logging.getLogger(__name__)


def cloud_height(obs: ShadowObservation) -> float:
    """z = r_shadow / tan(sun zenith)."""
    tan = math.tan(obs.sun_zenith)
    if not math.isfinite(tan) or tan <= 0.0:
        raise NumericError(f"degenerate sun zenith {obs.sun_zenith}")
    r = math.hypot(obs.cloud_xy[0] - obs.shadow_xy[0], obs.cloud_xy[1] - obs.shadow_xy[1])
    return r / tan


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing the between-class variance of a histogram."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise InvalidInputError("cannot threshold an empty image")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return hi
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight_low = np.cumsum(counts)
    weight_high = weight_low[-1] - weight_low
    sum_low = np.cumsum(counts * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_low = sum_low / weight_low
        mean_high = (sum_low[-1] - sum_low) / weight_high
        between = weight_low * weight_high * (mean_low - mean_high) ** 2
    between = np.nan_to_num(between, nan=-1.0)
    # split after the best bin: pixels above its upper edge are foreground
    return float(edges[int(np.argmax(between)) + 1])


def center_of_mass(image: np.ndarray, threshold: float | None = None) -> tuple[float, float]:
    """Intensity-weighted (row, col) centroid of the pixels above a threshold (Otsu when unset)."""
    image = np.asarray(image, dtype=float)
    if image.size == 0:
        raise InvalidInputError("empty image")
    if threshold is None:
        threshold = otsu_threshold(image)
        selected = image >= threshold
        if selected.all():
            selected = image > threshold
    else:
        selected = image > threshold
    if not selected.any() or image[selected].sum() <= 0:
        raise InvalidInputError(f"no pixel above threshold {threshold:g}")
    row, col = ndimage.center_of_mass(np.where(selected, image, 0.0))
    return float(row), float(col)


def _project_to_plane(origin: np.ndarray, direction: np.ndarray, altitude: float) -> np.ndarray:
    if abs(direction[2]) < 1e-12:
        raise NumericError("centroid ray is parallel to the cloud plane")
    s = (altitude - origin[2]) / direction[2]
    if s <= 0:
        raise NumericError("cloud plane lies behind the camera")
    return origin + s * direction


def estimate_drift(
    centroids,
    epochs: list[ViewEpoch],
    altitude: float,
    camera_index: int = 0,
    reference_time: float | None = None,
) -> DriftEstimate:
    """Wind from the track of image centroids projected to the cloud altitude.

    `centroids[k]` is the (row, col) cloud centroid in camera `camera_index`
    of epoch k.
    """
    if len(epochs) < 2:
        raise InvalidInputError("drift needs at least two epochs")
    if len(centroids) != len(epochs):
        raise InvalidInputError(f"{len(centroids)} centroids for {len(epochs)} epochs")

    times = []
    points = []
    for (row, col), epoch in zip(centroids, epochs):
        camera = epoch.cameras[camera_index]
        t = camera.pixel_time(row)
        ray = ray_through(camera, row, col, t)
        times.append(t)
        points.append(_project_to_plane(ray.origin, ray.direction, altitude)[:2])
    times = np.asarray(times)
    points = np.asarray(points)

    if reference_time is None:
        reference_time = 0.5 * (epochs[0].time + epochs[-1].time)
    design = np.column_stack([np.ones_like(times), times - reference_time])
    coeffs, *_ = np.linalg.lstsq(design, points, rcond=None)
    anchor, velocity = coeffs[0], coeffs[1]
    fitted = design @ coeffs
    residual = float(np.sqrt(((fitted - points) ** 2).sum(axis=1).mean()))

    corrections = [(float(dx), float(dy), 0.0) for dx, dy in anchor - points]
    heading = math.degrees(math.atan2(velocity[0], velocity[1])) % 360.0
    estimate = DriftEstimate(
        velocity=(float(velocity[0]), float(velocity[1])),
        heading=heading,
        altitude=altitude,
        reference_time=reference_time,
        corrections=corrections,
        residual=residual,
    )
    logger.info(
        "Drift %.2f km/h toward %.1f deg (rms residual %.3g m)", estimate.speed_kmh, heading, residual
    )
    return estimate


def register_epochs(epochs: list[ViewEpoch], drift: DriftEstimate) -> list[ViewEpoch]:
    """Shift every camera of epoch k by the k-th drift correction (cloud-fixed frame)."""
    if len(drift.corrections) != len(epochs):
        raise InvalidInputError(f"{len(drift.corrections)} corrections for {len(epochs)} epochs")
    registered = []
    for epoch, shift in zip(epochs, drift.corrections):
        cameras = tuple(
            camera.model_copy(
                update={"position": tuple(float(p + s) for p, s in zip(camera.position, shift))}
            )
            for camera in epoch.cameras
        )
        registered.append(epoch.model_copy(update={"cameras": cameras}))
    return registered


def _clear_pixels(images: ImageSet, clear: list[np.ndarray] | None) -> tuple[np.ndarray, np.ndarray]:
    if clear is None:
        return images.vector(), np.ones(images.n_pixels, dtype=bool)
    if len(clear) != len(images.images):
        raise InvalidInputError(f"{len(clear)} clear-pixel masks for {len(images.images)} images")
    selected = np.concatenate([np.asarray(mask, dtype=bool).ravel() for mask in clear])
    return images.vector(), selected


def estimate_albedo(
    measured: ImageSet,
    epoch: ViewEpoch,
    optics: OpticsModel,
    grid: VoxelGrid,
    gain: float | None = None,
    clear: list[np.ndarray] | None = None,
    bracket: tuple[float, float] = (0.0, 1.0),
) -> float:
    """Surface albedo minimizing the squared misfit of clear-sky pixels.

    `clear` optionally selects the cloud-free pixels of each image.
    """
    measured.require_matches(epoch)
    y, selected = _clear_pixels(measured, clear)
    if not selected.any():
        raise InvalidInputError("no clear-sky pixels")
    y = y[selected]

    # the clear-sky model is affine in the albedo
    base = render_clear_sky(optics, epoch, grid, gain, albedo=0.0).vector()[selected]
    slope = render_clear_sky(optics, epoch, grid, gain, albedo=1.0).vector()[selected] - base

    def objective(a: float) -> float:
        r = y - base - a * slope
        return float(r @ r)

    lo, hi = bracket
    candidates = np.linspace(lo, hi, 101)
    scores = np.array([objective(a) for a in candidates])
    best = int(np.argmin(scores))
    left = candidates[max(best - 1, 0)]
    right = candidates[min(best + 1, len(candidates) - 1)]
    result = optimize.minimize_scalar(objective, bounds=(left, right), method="bounded", options={"xatol": 1e-6})

    albedo = float(candidates[best])
    if result.success and objective(float(result.x)) <= scores[best]:
        albedo = float(result.x)
    logger.info("Surface albedo %.6f from %d clear pixels", albedo, y.size)
    return albedo
