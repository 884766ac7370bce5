import logging
import math

import numpy as np
import pytest
from scipy import integrate

from conftest import fan_epoch, nadir_epoch, random_field
from src.errors import InvalidInputError, ShapeMismatchError
from src.forward import (
    ImageSet,
    RenderWorkspace,
    henyey_greenstein,
    rayleigh_phase,
    render,
    render_clear_sky,
    render_gradient,
    render_with_adjoint,
)
from src.geometry import ViewEpoch, make_camera, sun_direction
from src.grid import ExtinctionField
from src.schema import OpticsModel


@pytest.mark.parametrize("g", [0.0, 0.5, 0.85, -0.3])
def test_henyey_greenstein_is_normalized(g):
    total, _ = integrate.quad(lambda mu: 2 * math.pi * henyey_greenstein(mu, g), -1.0, 1.0, limit=200)
    assert total == pytest.approx(1.0, rel=1e-6)


def test_rayleigh_is_normalized():
    total, _ = integrate.quad(lambda mu: 2 * math.pi * rayleigh_phase(mu), -1.0, 1.0)
    assert total == pytest.approx(1.0, rel=1e-10)


def test_linear_transmittance_through_uniform_slab(small_grid, linear_optics):
    beta = 1.7
    images = render(ExtinctionField.full(small_grid, beta), nadir_epoch(small_grid), linear_optics)
    assert images.images[0][1, 1] == pytest.approx(math.exp(-beta * 0.3), rel=1e-12)


def test_linear_empty_field_is_background(small_grid, linear_optics):
    optics = linear_optics.model_copy(update={"background_radiance": 2.0, "gain": 3.0})
    images = render(ExtinctionField.zeros(small_grid), nadir_epoch(small_grid), optics)
    np.testing.assert_allclose(images.images[0], 6.0)


def test_single_scatter_uniform_slab(small_grid):
    optics = OpticsModel(mode="single_scatter", phase_g=0.0, single_scatter_albedo=1.0, surface_albedo=0.0)
    beta = 2.0
    pixel = render(ExtinctionField.full(small_grid, beta), nadir_epoch(small_grid), optics).images[0][1, 1]

    # six 50 m midpoint samples, sun and camera legs both equal to the depth below the top
    h = 0.05
    depths = h * (np.arange(6) + 0.5)
    discrete = (h * beta / (4 * math.pi) * np.exp(-2 * beta * depths)).sum()
    assert pixel == pytest.approx(discrete, rel=1e-10)

    tau = beta * 0.3
    assert pixel == pytest.approx((1 - math.exp(-2 * tau)) / (2 * 4 * math.pi), rel=5e-3)


def test_surface_term_of_clear_sky(small_grid):
    optics = OpticsModel(mode="single_scatter", surface_albedo=0.2, sun_irradiance=1.5)
    zenith = math.radians(35.0)
    epoch = nadir_epoch(small_grid, sun=sun_direction(zenith, math.radians(200.0)))
    images = render_clear_sky(optics, epoch, small_grid)
    expected = 0.2 * 1.5 * math.cos(zenith) / math.pi
    np.testing.assert_allclose(images.images[0], expected, rtol=1e-12)
    darker = render_clear_sky(optics, epoch, small_grid, albedo=0.1)
    np.testing.assert_allclose(darker.images[0], expected / 2, rtol=1e-12)


def test_no_surface_term_with_sun_below_horizon(small_grid):
    optics = OpticsModel(mode="single_scatter", surface_albedo=0.3)
    epoch = nadir_epoch(small_grid, sun=(0.0, 0.6, -0.8))
    np.testing.assert_array_equal(render_clear_sky(optics, epoch, small_grid).images[0], 0.0)


def _cost(field, epoch, optics, measured):
    return 0.5 * float(((render(field, epoch, optics).vector() - measured.vector()) ** 2).sum())


def _oblique_epoch(grid):
    center = grid.center
    camera = make_camera(center + np.array([1500.0, -800.0, 1800.0]), center, (0.0, 1.0, 0.0), 9, 9, 0.02)
    nadir = nadir_epoch(grid, size=7, pitch=0.03).cameras[0].model_copy(update={"camera_id": 1})
    sun = sun_direction(math.radians(40.0), math.radians(120.0))
    return ViewEpoch(time=0.0, cameras=(camera, nadir), sun_direction=tuple(sun))


@pytest.mark.parametrize("mode", ["linear", "single_scatter"])
def test_adjoint_gradient_matches_finite_differences(small_grid, mode):
    optics = OpticsModel(mode=mode, phase_g=0.6, air_extinction=0.05, surface_albedo=0.1, gain=1.3)
    epoch = _oblique_epoch(small_grid)
    field = random_field(small_grid, seed=4)
    rendered = render(random_field(small_grid, seed=5), epoch, optics)
    measured = ImageSet(time=0.0, images=tuple(1.1 * image for image in rendered.images))

    _, cost, grad = render_with_adjoint(field, epoch, optics, None, measured)
    assert cost == pytest.approx(_cost(field, epoch, optics, measured), rel=1e-12)

    step = 1e-4
    rng = np.random.default_rng(6)
    voxels = [tuple(int(rng.integers(n)) for n in small_grid.shape) for _ in range(8)]
    numeric = []
    for voxel in voxels:
        values = []
        for sign in (1.0, -1.0):
            shifted = field.values.copy()
            shifted[voxel] += sign * step
            values.append(_cost(ExtinctionField(small_grid, shifted), epoch, optics, measured))
        numeric.append((values[0] - values[1]) / (2 * step))
    analytic = np.array([grad[voxel] for voxel in voxels])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8 * np.abs(grad).max())


def test_render_gradient_agrees_with_adjoint(small_grid, scatter_optics):
    epoch = fan_epoch(small_grid)
    field = random_field(small_grid, seed=7)
    rendered = render(field, epoch, scatter_optics)
    measured = ImageSet(time=0.0, images=tuple(0.5 * image for image in rendered.images))
    _, _, grad = render_with_adjoint(field, epoch, scatter_optics, None, measured)
    residual = ImageSet(time=0.0, images=tuple(r - m for r, m in zip(rendered.images, measured.images)))
    np.testing.assert_allclose(render_gradient(field, epoch, scatter_optics, None, residual), grad, rtol=1e-10)


def test_render_is_independent_of_thread_count(small_grid, scatter_optics, monkeypatch):
    epoch = fan_epoch(small_grid)
    field = random_field(small_grid, seed=8)
    workspace = RenderWorkspace(step=40.0, rays_per_task=16)
    measured = render(random_field(small_grid, seed=9), epoch, scatter_optics, workspace=workspace)

    results = []
    for threads in ("1", "4"):
        monkeypatch.setenv("T4D_THREADS", threads)
        results.append(render_with_adjoint(field, epoch, scatter_optics, None, measured, workspace))
    (images_a, cost_a, grad_a), (images_b, cost_b, grad_b) = results
    for a, b in zip(images_a.images, images_b.images):
        np.testing.assert_array_equal(a, b)
    assert cost_a == cost_b
    np.testing.assert_array_equal(grad_a, grad_b)


def test_step_larger_than_half_voxel_is_rejected(small_grid):
    with pytest.raises(InvalidInputError):
        RenderWorkspace.for_grid(small_grid, OpticsModel(step=60.0))
    assert RenderWorkspace.for_grid(small_grid).step == 50.0


def test_measured_images_must_match_cameras(small_grid, linear_optics):
    epoch = nadir_epoch(small_grid, size=3)
    wrong = ImageSet(time=0.0, images=(np.zeros((4, 4)),))
    with pytest.raises(ShapeMismatchError):
        render_with_adjoint(ExtinctionField.zeros(small_grid), epoch, linear_optics, None, wrong)


def test_image_set_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        ImageSet(time=0.0, images=(np.array([[np.nan]]),))


def test_render_logs_each_epoch(small_grid, linear_optics, caplog):
    with caplog.at_level(logging.DEBUG, logger="src.forward"):
        render(random_field(small_grid), fan_epoch(small_grid, time=20.0, n_views=3), linear_optics)
    assert "Rendering 3 cameras at t=20" in caplog.text
