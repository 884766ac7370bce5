"""Differentiable image formation.

Two forward models share one ray marcher:

* linear: Beer-Lambert attenuation of a background radiance plus the
  sun-lit surface seen through the medium;
* single_scatter: sunlight scattered once by the medium (Henyey-Greenstein
  for the extinction field, Rayleigh for air) plus the surface term.

Every march is a fixed-step midpoint rule, so the discrete pixel values are
smooth functions of the voxel values and `render_with_adjoint` returns their
exact derivative.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeMismatchError
from .geometry import Camera, ViewEpoch, camera_rays
from .grid import ExtinctionField, VoxelGrid, ray_box_intersection, trilinear_weights
from .parallel import ordered_map
from .schema import OpticsModel

logger = logging.getLogger(__name__)


def henyey_greenstein(mu, g: float):
    """Phase function per steradian for scattering-angle cosine mu."""
    mu = np.asarray(mu, dtype=float)
    return (1.0 - g * g) / (4.0 * math.pi * (1.0 + g * g - 2.0 * g * mu) ** 1.5)


def rayleigh_phase(mu):
    mu = np.asarray(mu, dtype=float)
    return 3.0 / (16.0 * math.pi) * (1.0 + mu * mu)


@dataclass(frozen=True)
class ImageSet:
    """Images of one epoch, one (rows, cols) intensity plane per camera."""

    time: float
    images: tuple[np.ndarray, ...]

    def __post_init__(self):
        images = tuple(np.asarray(image, dtype=float) for image in self.images)
        for image in images:
            if not np.all(np.isfinite(image)):
                raise InvalidInputError("image intensities must be finite")
        object.__setattr__(self, "images", images)

    def vector(self) -> np.ndarray:
        """The concatenated measurement vector y_t."""
        return np.concatenate([image.ravel() for image in self.images])

    @property
    def n_pixels(self) -> int:
        return sum(image.size for image in self.images)

    def require_matches(self, epoch: ViewEpoch) -> None:
        if len(self.images) != len(epoch.cameras):
            raise ShapeMismatchError(
                f"{len(self.images)} images for {len(epoch.cameras)} cameras at t={epoch.time}"
            )
        for image, camera in zip(self.images, epoch.cameras):
            if image.shape != (camera.rows, camera.cols):
                raise ShapeMismatchError(
                    f"image shape {image.shape} does not match camera {camera.camera_id} "
                    f"({camera.rows}, {camera.cols})"
                )


@dataclass(frozen=True)
class RenderWorkspace:
    # ray-march step, meters
    step: float
    # rays handled by one task; fixes the reduction order of gradient sums
    rays_per_task: int = 128

    @classmethod
    def for_grid(cls, grid: VoxelGrid, optics: OpticsModel | None = None) -> "RenderWorkspace":
        limit = grid.min_edge / 2.0
        step = limit
        if optics is not None and optics.step is not None:
            step = optics.step
        if step > limit * (1 + 1e-12):
            raise InvalidInputError(f"ray step {step} m exceeds half the smallest voxel edge ({limit} m)")
        return cls(step=step)


@dataclass
class _March:
    index: np.ndarray  # (B, N, 8) flat voxel indices
    weight: np.ndarray  # (B, N, 8) trilinear weights, zero on padding samples
    valid: np.ndarray  # (B, N)
    h_km: np.ndarray  # (B,) sample length
    beta: np.ndarray  # (B, N) field extinction at the samples
    points: np.ndarray  # (B, N, 3)

    def optical_depth(self, air: float) -> np.ndarray:
        return self.h_km * (self.beta + air * self.valid).sum(axis=1)


def _march(grid: VoxelGrid, flat: np.ndarray, origins: np.ndarray, directions: np.ndarray, step: float) -> _March:
    t_near, t_far = ray_box_intersection(grid, origins, directions)
    length = np.maximum(t_far - t_near, 0.0)
    n = np.ceil(length / step * (1.0 - 1e-12)).astype(np.int64)
    h = np.where(n > 0, length / np.maximum(n, 1), 0.0)
    n_max = int(n.max()) if n.size else 0

    k = np.arange(n_max)
    valid = k[None, :] < n[:, None]
    t = t_near[:, None] + (k[None, :] + 0.5) * h[:, None]
    points = origins[:, None, :] + t[..., None] * directions[:, None, :]
    index, weight = trilinear_weights(grid, points)
    weight = weight * valid[..., None]
    beta = (flat[index] * weight).sum(axis=-1)
    return _March(index=index, weight=weight, valid=valid, h_km=h / 1000.0, beta=beta, points=points)


def _scatter(grad: np.ndarray, march: _March, coefficient: np.ndarray) -> None:
    """grad[v] += sum of coefficient * trilinear weight over every sample touching voxel v."""
    if march.index.size == 0:
        return
    grad += np.bincount(
        march.index.ravel(),
        weights=(march.weight * coefficient[..., None]).ravel(),
        minlength=grad.size,
    )


def _ground_hits(origins: np.ndarray, directions: np.ndarray):
    hits = (directions[:, 2] < 0.0) & (origins[:, 2] > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(hits, -origins[:, 2] / directions[:, 2], 0.0)
    return hits, origins + t[:, None] * directions


def _repeat(direction: np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(direction, (n, 3))


def _render_block(
    grid: VoxelGrid,
    flat: np.ndarray,
    origins: np.ndarray,
    directions: np.ndarray,
    sun: np.ndarray,
    optics: OpticsModel,
    gain: float,
    step: float,
    measured: np.ndarray | None,
    residual: np.ndarray | None,
    want_gradient: bool,
):
    """Pixels of a block of rays; with a residual, also d(sum residual*pixel)/d(voxel)."""
    air = optics.air_extinction
    energy = optics.sun_irradiance
    cos_sun = float(sun[2])
    n_rays = origins.shape[0]

    cam = _march(grid, flat, origins, directions, step)
    h = cam.h_km[:, None]
    b = cam.beta + air * cam.valid
    cam_depth = h[:, 0] * b.sum(axis=1)
    cam_trans = np.exp(-cam_depth)

    # surface reflection of direct sunlight
    surface = np.zeros(n_rays)
    ground = None
    ground_rays = None
    if optics.surface_albedo > 0.0 and cos_sun > 0.0:
        hits, ground_points = _ground_hits(origins, directions)
        if np.any(hits):
            ground_rays = np.flatnonzero(hits)
            ground = _march(grid, flat, ground_points[ground_rays], _repeat(sun, ground_rays.size), step)
            ground_trans = np.exp(-ground.optical_depth(air))
            surface[ground_rays] = (
                optics.surface_albedo * energy * cos_sun / math.pi * ground_trans * cam_trans[ground_rays]
            )

    sunlit = None
    if optics.mode == "linear":
        pixel = optics.background_radiance * cam_trans + surface
    else:
        tau_before = h * (np.cumsum(b, axis=1) - 0.5 * b)
        sun_depth = np.zeros_like(b)
        lit_rays, lit_samples = np.nonzero(cam.valid)
        if lit_rays.size:
            sunlit = _march(grid, flat, cam.points[lit_rays, lit_samples], _repeat(sun, lit_rays.size), step)
            sun_depth[lit_rays, lit_samples] = sunlit.optical_depth(air)
        cos_psi = directions @ sun
        p_cloud = henyey_greenstein(cos_psi, optics.phase_g)[:, None]
        p_air = rayleigh_phase(cos_psi)[:, None]
        attenuation = np.exp(-(sun_depth + tau_before)) * cam.valid
        scatter_coeff = optics.single_scatter_albedo * p_cloud
        contribution = h * (scatter_coeff * cam.beta + air * p_air) * energy * attenuation
        pixel = contribution.sum(axis=1) + surface
    pixel = gain * pixel

    cost = 0.0
    if measured is not None:
        residual = pixel - measured
        cost = 0.5 * float(residual @ residual)

    grad = None
    if want_gradient:
        grad = np.zeros(grid.size)
        r = gain * residual
        if optics.mode == "linear":
            # every term of a linear-mode pixel carries the camera-leg transmittance
            coeff_cam = -h * (pixel / gain)[:, None] * cam.valid
        else:
            later = contribution.sum(axis=1, keepdims=True) - np.cumsum(contribution, axis=1)
            coeff_cam = (
                h * scatter_coeff * energy * attenuation
                - h * (later + 0.5 * contribution)
                - h * surface[:, None] * cam.valid
            )
            if sunlit is not None:
                lit = contribution[lit_rays, lit_samples] * r[lit_rays]
                _scatter(grad, sunlit, -sunlit.h_km[:, None] * lit[:, None] * sunlit.valid)
        _scatter(grad, cam, coeff_cam * r[:, None])
        if ground is not None:
            reflected = surface[ground_rays] * r[ground_rays]
            _scatter(grad, ground, -ground.h_km[:, None] * reflected[:, None] * ground.valid)
    return pixel, cost, grad


def _camera_pass(
    field: ExtinctionField,
    camera: Camera,
    epoch: ViewEpoch,
    optics: OpticsModel,
    gain: float,
    workspace: RenderWorkspace,
    measured: np.ndarray | None = None,
    residual: np.ndarray | None = None,
    want_gradient: bool = False,
):
    grid = field.grid
    flat = field.flat()
    sun = np.asarray(epoch.sun_direction, dtype=float)
    origins, directions = camera_rays(camera)
    origins = origins.reshape(-1, 3)
    directions = directions.reshape(-1, 3)
    measured_flat = None if measured is None else np.asarray(measured, dtype=float).ravel()
    residual_flat = None if residual is None else np.asarray(residual, dtype=float).ravel()

    n_rays = origins.shape[0]
    blocks = [slice(s, min(s + workspace.rays_per_task, n_rays)) for s in range(0, n_rays, workspace.rays_per_task)]

    def run(block: slice):
        return _render_block(
            grid,
            flat,
            origins[block],
            directions[block],
            sun,
            optics,
            gain,
            workspace.step,
            None if measured_flat is None else measured_flat[block],
            None if residual_flat is None else residual_flat[block],
            want_gradient,
        )

    results = ordered_map(run, blocks)
    image = np.concatenate([pixels for pixels, _, _ in results]).reshape(camera.rows, camera.cols)
    cost = 0.0
    grad = np.zeros(grid.size) if want_gradient else None
    for _, block_cost, block_grad in results:
        cost += block_cost
        if want_gradient:
            grad += block_grad
    return image, cost, grad


def _validate(field: ExtinctionField) -> None:
    if not np.all(np.isfinite(field.values)):
        raise InvalidInputError("extinction field must be finite")


def render(
    field: ExtinctionField,
    epoch: ViewEpoch,
    optics: OpticsModel,
    gain: float | None = None,
    workspace: RenderWorkspace | None = None,
) -> ImageSet:
    _validate(field)
    gain = optics.gain if gain is None else gain
    workspace = workspace or RenderWorkspace.for_grid(field.grid, optics)
    logger.debug("Rendering %d cameras at t=%g", len(epoch.cameras), epoch.time)
    images = [
        _camera_pass(field, camera, epoch, optics, gain, workspace)[0] for camera in epoch.cameras
    ]
    return ImageSet(time=epoch.time, images=tuple(images))


def render_gradient(
    field: ExtinctionField,
    epoch: ViewEpoch,
    optics: OpticsModel,
    gain: float | None,
    residual_images: ImageSet,
    workspace: RenderWorkspace | None = None,
) -> np.ndarray:
    """sum over pixels of residual * d(pixel)/d(voxel), shaped like the grid."""
    _validate(field)
    residual_images.require_matches(epoch)
    gain = optics.gain if gain is None else gain
    workspace = workspace or RenderWorkspace.for_grid(field.grid, optics)
    grad = np.zeros(field.grid.size)
    # camera-then-row accumulation order
    for camera, residual in zip(epoch.cameras, residual_images.images):
        grad += _camera_pass(field, camera, epoch, optics, gain, workspace, residual=residual, want_gradient=True)[2]
    return grad.reshape(field.grid.shape, order="F")


def render_with_adjoint(
    field: ExtinctionField,
    epoch: ViewEpoch,
    optics: OpticsModel,
    gain: float | None,
    measured: ImageSet,
    workspace: RenderWorkspace | None = None,
) -> tuple[ImageSet, float, np.ndarray]:
    """Render an epoch, its data term 1/2 ||F(beta) - y||^2 and the gradient of that term."""
    _validate(field)
    measured.require_matches(epoch)
    gain = optics.gain if gain is None else gain
    workspace = workspace or RenderWorkspace.for_grid(field.grid, optics)
    images = []
    cost = 0.0
    grad = np.zeros(field.grid.size)
    for camera, y in zip(epoch.cameras, measured.images):
        image, camera_cost, camera_grad = _camera_pass(
            field, camera, epoch, optics, gain, workspace, measured=y, want_gradient=True
        )
        images.append(image)
        cost += camera_cost
        grad += camera_grad
    return ImageSet(time=epoch.time, images=tuple(images)), cost, grad.reshape(field.grid.shape, order="F")


def render_clear_sky(
    optics: OpticsModel,
    epoch: ViewEpoch,
    grid: VoxelGrid,
    gain: float | None = None,
    albedo: float | None = None,
) -> ImageSet:
    """Images of the domain without the extinction field: air and surface only."""
    if albedo is not None:
        optics = optics.model_copy(update={"surface_albedo": albedo})
    return render(ExtinctionField.zeros(grid), epoch, optics, gain)
