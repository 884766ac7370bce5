from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import GridMismatchError, InvalidInputError, ShapeMismatchError


class VoxelGrid(BaseModel):
    """Regular voxel grid. Distances are meters in (east, north, up)."""

    model_config = ConfigDict(frozen=True)

    nx: int = Field(ge=1)
    ny: int = Field(ge=1)
    nz: int = Field(ge=1)
    dx: float = Field(gt=0)
    dy: float = Field(gt=0)
    dz: float = Field(gt=0)

    # low corner of the bounding box
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def spacing(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.spacing * np.array(self.shape)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def min_edge(self) -> float:
        return min(self.dx, self.dy, self.dz)

    def voxel_center(self, i: int, j: int, k: int) -> np.ndarray:
        return self.lower + (np.array([i, j, k]) + 0.5) * self.spacing

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers, shape (nx, ny, nz, 3)."""
        axes = [
            self.lower[a] + (np.arange(n) + 0.5) * self.spacing[a]
            for a, n in enumerate(self.shape)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def compatible(self, other: "VoxelGrid") -> bool:
        return self == other

    def require_compatible(self, other: "VoxelGrid") -> None:
        if not self.compatible(other):
            raise GridMismatchError(f"incompatible grids: {self} vs {other}")

    def coarsen(self, factor: int) -> "VoxelGrid":
        """Grid covering at least the same box with `factor`x larger voxels."""
        return VoxelGrid(
            nx=-(-self.nx // factor),
            ny=-(-self.ny // factor),
            nz=-(-self.nz // factor),
            dx=self.dx * factor,
            dy=self.dy * factor,
            dz=self.dz * factor,
            origin=self.origin,
        )


@dataclass(frozen=True)
class ExtinctionField:
    """One volumetric state: extinction in km^-1 at voxel centers.

    `values` has shape (nx, ny, nz); the flat x-fastest order used by files
    is `values.ravel(order="F")`.
    """

    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ShapeMismatchError(
                f"field values shape {values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("extinction values must be finite")
        if np.any(values < 0):
            raise InvalidInputError("extinction values must be nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: VoxelGrid) -> "ExtinctionField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def full(cls, grid: VoxelGrid, value: float) -> "ExtinctionField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_flat(cls, grid: VoxelGrid, flat: np.ndarray) -> "ExtinctionField":
        return cls(grid, np.asarray(flat, dtype=float).reshape(grid.shape, order="F"))

    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def mass(self) -> float:
        return float(np.abs(self.values).sum())


@dataclass(frozen=True)
class FieldSequence:
    """Sampled 4D object: one ExtinctionField per strictly increasing time."""

    times: tuple[float, ...]
    states: tuple[ExtinctionField, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        states = tuple(self.states)
        if len(times) == 0 or len(times) != len(states):
            raise ShapeMismatchError(
                f"need matching nonempty times/states, got {len(times)} and {len(states)}"
            )
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInputError("sequence times must be strictly increasing")
        for state in states[1:]:
            states[0].grid.require_compatible(state.grid)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def grid(self) -> VoxelGrid:
        return self.states[0].grid

    def __len__(self) -> int:
        return len(self.states)

    def stack(self) -> np.ndarray:
        """Values of every state, shape (n_state, nx, ny, nz)."""
        return np.stack([s.values for s in self.states])

    def to_float32(self) -> "FieldSequence":
        """Values rounded to float32, the precision field files store."""
        states = tuple(ExtinctionField(s.grid, s.values.astype(np.float32)) for s in self.states)
        return FieldSequence(self.times, states)

    @classmethod
    def from_stack(
        cls, grid: VoxelGrid, times: list[float], stack: np.ndarray
    ) -> "FieldSequence":
        return cls(tuple(times), tuple(ExtinctionField(grid, v) for v in stack))

    def resample(self, times) -> "FieldSequence":
        """States at other times, by `at`."""
        return FieldSequence(tuple(float(t) for t in times), tuple(self.at(float(t)) for t in times))

    def at(self, t: float) -> ExtinctionField:
        """State at time t; linear interpolation between bracketing samples, held at the ends."""
        times = np.asarray(self.times)
        if t <= times[0]:
            return self.states[0]
        if t >= times[-1]:
            return self.states[-1]
        hi = int(np.searchsorted(times, t, side="left"))
        if times[hi] == t:
            return self.states[hi]
        lo = hi - 1
        f = (t - times[lo]) / (times[hi] - times[lo])
        values = (1.0 - f) * self.states[lo].values + f * self.states[hi].values
        return ExtinctionField(self.grid, values)


@dataclass(frozen=True)
class CarveMask:
    grid: VoxelGrid
    # true = may contain object
    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.shape != self.grid.shape:
            raise ShapeMismatchError(
                f"mask shape {flags.shape} does not match grid {self.grid.shape}"
            )
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @classmethod
    def full(cls, grid: VoxelGrid, value: bool = True) -> "CarveMask":
        return cls(grid, np.full(grid.shape, value))

    @property
    def count(self) -> int:
        return int(self.flags.sum())


def trilinear_weights(grid: VoxelGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat voxel indices and weights of the 8 interpolation corners of each point.

    Returns (index, weight), each shaped points.shape[:-1] + (8,). Indices are
    x-fastest flat indices. Neighbours past the last voxel center are clamped
    to the grid; points outside the bounding box get all-zero weights.
    """
    points = np.asarray(points, dtype=float)
    lead = points.shape[:-1]
    p = points.reshape(-1, 3)
    shape = np.array(grid.shape)

    u = (p - grid.lower) / grid.spacing - 0.5
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    lo = np.clip(base, 0, shape - 1)
    hi = np.clip(base + 1, 0, shape - 1)

    inside = np.all((p >= grid.lower) & (p <= grid.upper), axis=1)

    index = np.empty((p.shape[0], 8), dtype=np.int64)
    weight = np.empty((p.shape[0], 8))
    corner = 0
    for cz in (0, 1):
        iz = hi[:, 2] if cz else lo[:, 2]
        wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
        for cy in (0, 1):
            iy = hi[:, 1] if cy else lo[:, 1]
            wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
            for cx in (0, 1):
                ix = hi[:, 0] if cx else lo[:, 0]
                wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
                index[:, corner] = ix + grid.nx * (iy + grid.ny * iz)
                weight[:, corner] = wx * wy * wz
                corner += 1
    weight[~inside] = 0.0
    index[~inside] = 0
    return index.reshape(lead + (8,)), weight.reshape(lead + (8,))


def trilinear_sample(field: ExtinctionField, point) -> float:
    """Extinction (km^-1) at a point in meters; 0 outside the bounding box."""
    point = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(point)):
        raise InvalidInputError("sample point must be finite")
    index, weight = trilinear_weights(field.grid, point[None, :])
    return float((field.flat()[index[0]] * weight[0]).sum())


def mask_apply(field: ExtinctionField, mask: CarveMask) -> ExtinctionField:
    field.grid.require_compatible(mask.grid)
    return ExtinctionField(field.grid, np.where(mask.flags, field.values, 0.0))


def ray_box_intersection(grid: VoxelGrid, origins: np.ndarray, directions: np.ndarray):
    """Entry (clamped at 0) and exit distances of rays through the grid box.

    Rays that miss the box get t_far < t_near.
    """
    lower, upper = grid.lower, grid.upper
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lower - origins) / directions
        t2 = (upper - origins) / directions
    parallel = directions == 0.0
    inside = (origins >= lower) & (origins <= upper)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.maximum(t_lo.max(axis=1), 0.0)
    t_far = t_hi.min(axis=1)
    return t_near, t_far
