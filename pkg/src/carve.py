"""Occupancy bound on the object from back-projected cloudy pixels."""

import logging

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .forward import ImageSet
from .geometry import Camera, ViewEpoch, camera_rays
from .grid import CarveMask, VoxelGrid, ray_box_intersection
from .parallel import ordered_map
from .preprocess import otsu_threshold

logger = logging.getLogger(__name__)


def traverse_votes(grid: VoxelGrid, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Per-voxel count of rays crossing it, each ray counted once per voxel.

    Voxel-by-voxel digital differential traversal of all rays at once.
    """
    votes = np.zeros(grid.size, dtype=np.int64)
    t_near, t_far = ray_box_intersection(grid, origins, directions)
    hit = t_far > t_near
    if not hit.any():
        return votes
    o, d = origins[hit], directions[hit]
    t_near, t_far = t_near[hit], t_far[hit]

    shape = np.array(grid.shape)
    spacing = grid.spacing
    entry = o + t_near[:, None] * d
    cell = np.clip(np.floor((entry - grid.lower) / spacing).astype(np.int64), 0, shape - 1)

    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0, spacing / np.abs(d), np.inf)
        boundary = grid.lower + (cell + (step > 0)) * spacing
        t_max = np.where(d != 0, (boundary - o) / d, np.inf)

    active = np.ones(len(o), dtype=bool)
    rows = np.arange(len(o))
    while active.any():
        idx = cell[active]
        flat = idx[:, 0] + grid.nx * (idx[:, 1] + grid.ny * idx[:, 2])
        votes += np.bincount(flat, minlength=grid.size)

        axis = np.argmin(t_max, axis=1)
        t_exit = t_max[rows, axis]
        cell[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        inside = np.all((cell >= 0) & (cell < shape), axis=1)
        active &= inside & (t_exit < t_far)
    return votes


def _cloudy(image: np.ndarray, clear: np.ndarray | None, pixel_threshold: float | None) -> np.ndarray:
    if clear is not None:
        departure = np.abs(image - clear)
        threshold = otsu_threshold(departure) if pixel_threshold is None else pixel_threshold
        return departure > threshold
    if pixel_threshold is not None:
        return image > pixel_threshold
    threshold = otsu_threshold(image)
    return image >= threshold if threshold > image.min() else np.zeros(image.shape, dtype=bool)


def _sees_domain(grid: VoxelGrid, camera: Camera) -> bool:
    origins, directions = camera_rays(camera)
    t_near, t_far = ray_box_intersection(grid, origins.reshape(-1, 3), directions.reshape(-1, 3))
    return bool(np.any(t_far > t_near))


def upsample(coarse: np.ndarray, factor: int, shape: tuple[int, int, int]) -> np.ndarray:
    ix, iy, iz = (np.arange(n) // factor for n in shape)
    return coarse[np.ix_(ix, iy, iz)]


def space_carve(
    images: list[ImageSet],
    epochs: list[ViewEpoch],
    grid: VoxelGrid,
    pixel_threshold: float | None = None,
    vote_threshold: int | None = None,
    dilate: int = 1,
    clear_sky: list[ImageSet] | None = None,
    coarse: int = 2,
) -> CarveMask:
    """Voxels crossed by more than `vote_threshold` cloudy-pixel rays.

    A pixel is cloudy when it departs from its clear-sky image by more than
    `pixel_threshold`; without clear-sky images, when it exceeds the threshold
    itself. An unset threshold is chosen per image by Otsu's method. Votes are
    counted on a grid `coarse` times coarser, then upsampled and dilated.
    """
    if len(images) != len(epochs):
        raise InvalidInputError(f"{len(images)} image sets for {len(epochs)} epochs")
    if clear_sky is not None and len(clear_sky) != len(epochs):
        raise InvalidInputError(f"{len(clear_sky)} clear-sky sets for {len(epochs)} epochs")
    if pixel_threshold is not None and pixel_threshold < 0:
        raise InvalidInputError("pixel threshold must be nonnegative")
    if vote_threshold is not None and vote_threshold < 0:
        raise InvalidInputError("vote threshold must be nonnegative")
    if coarse < 1 or dilate < 0:
        raise InvalidInputError("coarse factor must be >= 1 and dilation >= 0")

    views = []
    for k, (image_set, epoch) in enumerate(zip(images, epochs)):
        image_set.require_matches(epoch)
        for c, (camera, image) in enumerate(zip(epoch.cameras, image_set.images)):
            clear = None if clear_sky is None else clear_sky[k].images[c]
            views.append((camera, _cloudy(image, clear, pixel_threshold)))

    if vote_threshold is None:
        seeing = sum(_sees_domain(grid, camera) for camera, _ in views)
        vote_threshold = max(seeing - 1, 0)

    vote_grid = grid.coarsen(coarse)

    def back_project(view) -> np.ndarray:
        camera, cloudy = view
        if not cloudy.any():
            return np.zeros(vote_grid.size, dtype=np.int64)
        origins, directions = camera_rays(camera)
        return traverse_votes(vote_grid, origins[cloudy], directions[cloudy])

    votes = np.zeros(vote_grid.size, dtype=np.int64)
    for view_votes in ordered_map(back_project, views):
        votes += view_votes

    occupied = (votes > vote_threshold).reshape(vote_grid.shape, order="F")
    flags = upsample(occupied, coarse, grid.shape)
    if dilate > 0 and flags.any():
        flags = ndimage.binary_dilation(flags, structure=np.ones((3, 3, 3), dtype=bool), iterations=dilate)

    mask = CarveMask(grid, flags)
    logger.info(
        "Carved %d of %d voxels (%d views, vote threshold %d)", mask.count, grid.size, len(views), vote_threshold
    )
    return mask
