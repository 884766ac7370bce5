import numpy as np
import pytest

from src.errors import GridMismatchError, InvalidInputError, ShapeMismatchError
from src.grid import (
    CarveMask,
    ExtinctionField,
    FieldSequence,
    VoxelGrid,
    mask_apply,
    ray_box_intersection,
    trilinear_sample,
)


def test_voxel_centers(small_grid):
    np.testing.assert_allclose(small_grid.voxel_center(0, 0, 0), [50.0, 50.0, 50.0])
    np.testing.assert_allclose(small_grid.voxel_center(3, 1, 2), [350.0, 150.0, 250.0])
    centers = small_grid.voxel_centers()
    assert centers.shape == (4, 4, 3, 3)
    np.testing.assert_allclose(centers[3, 1, 2], small_grid.voxel_center(3, 1, 2))
    np.testing.assert_allclose(small_grid.center, [200.0, 200.0, 150.0])
    assert small_grid.size == 48


def test_uniform_field_is_uniform_inside_box(small_grid):
    field = ExtinctionField.full(small_grid, 2.5)
    rng = np.random.default_rng(1)
    for point in rng.uniform(small_grid.lower, small_grid.upper, size=(50, 3)):
        assert trilinear_sample(field, point) == pytest.approx(2.5, rel=1e-12)


def test_sample_outside_box_is_zero(small_grid):
    field = ExtinctionField.full(small_grid, 2.5)
    assert trilinear_sample(field, [-1.0, 50.0, 50.0]) == 0.0
    assert trilinear_sample(field, [50.0, 50.0, 301.0]) == 0.0


def test_sample_at_centers_and_between(small_grid):
    rng = np.random.default_rng(2)
    field = ExtinctionField(small_grid, rng.uniform(0.0, 5.0, size=small_grid.shape))
    assert trilinear_sample(field, small_grid.voxel_center(1, 2, 1)) == pytest.approx(field.values[1, 2, 1])
    midpoint = 0.5 * (small_grid.voxel_center(1, 2, 1) + small_grid.voxel_center(2, 2, 1))
    expected = 0.5 * (field.values[1, 2, 1] + field.values[2, 2, 1])
    assert trilinear_sample(field, midpoint) == pytest.approx(expected)


def test_sample_rejects_non_finite_point(small_grid):
    with pytest.raises(InvalidInputError):
        trilinear_sample(ExtinctionField.zeros(small_grid), [np.nan, 0.0, 0.0])


def test_field_validation(small_grid):
    with pytest.raises(ShapeMismatchError):
        ExtinctionField(small_grid, np.zeros((4, 4, 4)))
    with pytest.raises(InvalidInputError):
        ExtinctionField(small_grid, -np.ones(small_grid.shape))
    with pytest.raises(InvalidInputError):
        ExtinctionField(small_grid, np.full(small_grid.shape, np.inf))


def test_flat_order_is_x_fastest(small_grid):
    values = np.zeros(small_grid.shape)
    values[1, 0, 0] = 1.0
    values[0, 1, 0] = 2.0
    field = ExtinctionField(small_grid, values)
    assert field.flat()[1] == 1.0
    assert field.flat()[small_grid.nx] == 2.0
    np.testing.assert_array_equal(ExtinctionField.from_flat(small_grid, field.flat()).values, values)


def test_sequence_times_must_increase(small_grid):
    state = ExtinctionField.zeros(small_grid)
    with pytest.raises(InvalidInputError):
        FieldSequence((0.0, 0.0), (state, state))
    with pytest.raises(ShapeMismatchError):
        FieldSequence((0.0, 10.0), (state,))


def test_sequence_rejects_mixed_grids(small_grid):
    other = small_grid.model_copy(update={"dx": 50.0})
    with pytest.raises(GridMismatchError):
        FieldSequence((0.0, 1.0), (ExtinctionField.zeros(small_grid), ExtinctionField.zeros(other)))


def test_sequence_at_interpolates_and_holds(small_grid):
    seq = FieldSequence(
        (0.0, 10.0),
        (ExtinctionField.full(small_grid, 1.0), ExtinctionField.full(small_grid, 3.0)),
    )
    np.testing.assert_allclose(seq.at(2.5).values, 1.5)
    assert seq.at(-5.0) is seq.states[0]
    assert seq.at(50.0) is seq.states[1]
    resampled = seq.resample([0.0, 5.0, 10.0])
    assert resampled.times == (0.0, 5.0, 10.0)
    np.testing.assert_allclose(resampled.states[1].values, 2.0)


def test_mask_apply(small_grid):
    flags = np.zeros(small_grid.shape, dtype=bool)
    flags[1:3, 1:3, :] = True
    masked = mask_apply(ExtinctionField.full(small_grid, 4.0), CarveMask(small_grid, flags))
    assert masked.values[0, 0, 0] == 0.0
    assert masked.values[1, 1, 1] == 4.0
    assert masked.mass() == pytest.approx(4.0 * flags.sum())


def test_mask_grid_must_match(small_grid):
    other = VoxelGrid(nx=2, ny=2, nz=2, dx=1.0, dy=1.0, dz=1.0)
    with pytest.raises(GridMismatchError):
        mask_apply(ExtinctionField.zeros(small_grid), CarveMask.full(other))


def test_ray_box_intersection(small_grid):
    origins = np.array([[200.0, 200.0, 1000.0], [200.0, 200.0, 1000.0], [200.0, 200.0, 150.0]])
    directions = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    t_near, t_far = ray_box_intersection(small_grid, origins, directions)
    assert t_near[0] == pytest.approx(700.0)
    assert t_far[0] == pytest.approx(1000.0)
    assert t_far[1] < t_near[1]
    # starting inside the box
    assert t_near[2] == 0.0
    assert t_far[2] == pytest.approx(200.0)


def test_coarsen_covers_the_box(small_grid):
    coarse = small_grid.coarsen(3)
    assert coarse.shape == (2, 2, 1)
    assert np.all(coarse.upper >= small_grid.upper)
