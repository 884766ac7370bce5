import logging
import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import InvalidInputError
from src.geometry import (
    PODEX_ANGLES,
    Camera,
    ViewEpoch,
    angular_extent,
    build_epochs,
    camera_rays,
    fit_image_size,
    make_camera,
    heading_vector,
    make_baseline_epoch,
    make_fan_epoch,
    make_orbit_epochs,
    make_pushbroom_epochs,
    project_point,
    ray_for_pixel,
    ray_through,
    sun_direction,
    view_zenith,
)
from src.schema import SetupConfig, setup_preset


def test_directions():
    np.testing.assert_allclose(sun_direction(0.0, 0.0), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(sun_direction(math.pi / 2, math.pi / 2), [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(heading_vector(90.0), [1.0, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(heading_vector(0.0), [0.0, 1.0, 0.0])


def test_orbit_setup_a_spans_two_radians_at_mid_time():
    target = np.array([0.0, 0.0, 1000.0])
    epochs = make_orbit_epochs(3, 500_000.0, 500_000.0, 7350.0, 10.0, 7, target, image_size=5)
    assert [e.time for e in epochs] == [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
    assert all(len(e.cameras) == 3 for e in epochs)
    assert angular_extent([epochs[3]], target) == pytest.approx(2.0, rel=1e-9)
    assert math.degrees(angular_extent([epochs[3]], target)) > 114.0


def test_orbit_desk_scale_preserves_angles(small_grid):
    full = build_epochs(setup_preset("A").model_copy(update={"image_size": 5}), small_grid)
    desk = build_epochs(setup_preset("A").model_copy(update={"image_size": 5, "desk_scale": 0.01}), small_grid)
    for a, b in zip(full, desk):
        for ca, cb in zip(a.cameras, b.cameras):
            assert view_zenith(ca, small_grid.center) == pytest.approx(view_zenith(cb, small_grid.center), abs=1e-9)
    assert desk[0].cameras[0].position[2] < 10_000.0


def test_orbit_rejects_bad_parameters():
    with pytest.raises(InvalidInputError):
        make_orbit_epochs(0, 1.0, 1.0, 1.0, 1.0, 1, (0, 0, 0))
    with pytest.raises(InvalidInputError):
        make_orbit_epochs(2, -1.0, 1.0, 1.0, 1.0, 1, (0, 0, 0))


def test_center_pixel_looks_at_target():
    target = np.array([100.0, -50.0, 500.0])
    camera = make_orbit_epochs(1, 5000.0, 5000.0, 50.0, 10.0, 1, target, image_size=7)[0].cameras[0]
    ray = ray_for_pixel(camera, 3, 3)
    expected = (target - ray.origin) / np.linalg.norm(target - ray.origin)
    np.testing.assert_allclose(ray.direction, expected, atol=1e-12)


def test_project_point_inverts_ray_through():
    camera = make_orbit_epochs(2, 5000.0, 5000.0, 0.0, 10.0, 1, (0.0, 0.0, 0.0), image_size=11)[0].cameras[1]
    ray = ray_through(camera, 1.3, 7.6)
    row, col = project_point(camera, ray.origin + 3000.0 * ray.direction)
    assert row == pytest.approx(1.3, abs=1e-9)
    assert col == pytest.approx(7.6, abs=1e-9)


def test_pixel_bounds_are_checked():
    camera = make_orbit_epochs(1, 5000.0, 5000.0, 0.0, 10.0, 1, (0.0, 0.0, 0.0), image_size=5)[0].cameras[0]
    with pytest.raises(InvalidInputError):
        ray_for_pixel(camera, 5, 0)
    with pytest.raises(InvalidInputError):
        ray_for_pixel(camera, 0, -1)


def test_camera_rays_match_single_rays():
    camera = make_orbit_epochs(3, 5000.0, 5000.0, 0.0, 10.0, 1, (0.0, 0.0, 0.0), image_size=5)[0].cameras[2]
    origins, directions = camera_rays(camera)
    assert directions.shape == (5, 5, 3)
    ray = ray_for_pixel(camera, 4, 1)
    np.testing.assert_allclose(directions[4, 1], ray.direction, atol=1e-12)
    np.testing.assert_allclose(origins[4, 1], ray.origin)
    np.testing.assert_allclose(np.linalg.norm(directions, axis=-1), 1.0)


def test_pushbroom_rows_are_sequential():
    epochs = make_pushbroom_epochs(
        angles=[-30.0, 0.0, 30.0], altitude=2000.0, interval=5.0, heading=0.0, speed=100.0, gsd=10.0,
        line_period=0.1, image_size=9,
    )
    assert [e.time for e in epochs] == [0.0, 5.0, 10.0]
    camera = epochs[1].cameras[0]
    assert camera.kind == "pushbroom"
    assert camera.pixel_time(5) - camera.pixel_time(4) == pytest.approx(0.1)
    assert camera.pixel_time(4) == pytest.approx(5.0)
    origins, directions = camera_rays(camera)
    np.testing.assert_allclose(origins[5, 0] - origins[4, 0], [0.0, 10.0, 0.0], atol=1e-9)
    # rows share the stare direction
    np.testing.assert_allclose(directions[0], directions[8])
    # a backward-looking stare is taken from ahead of the target
    assert view_zenith(epochs[0].cameras[0], (0.0, 0.0, 0.0)) == pytest.approx(math.radians(30.0))


def test_pushbroom_preset_uses_podex_angles(small_grid):
    epochs = build_epochs(setup_preset("C").model_copy(update={"image_size": 3, "desk_scale": 0.1}), small_grid)
    assert len(epochs) == len(PODEX_ANGLES) == 21
    assert epochs[1].time - epochs[0].time == pytest.approx(20.0)


def test_pushbroom_rejects_horizon_angles():
    with pytest.raises(InvalidInputError):
        make_pushbroom_epochs(angles=[90.0], image_size=3)


def test_baseline_gathers_every_camera(small_grid):
    setup = SetupConfig(kind="baseline", n_sats=2, n_epochs=3, image_size=3, desk_scale=0.01)
    (epoch,) = build_epochs(setup, small_grid)
    assert epoch.time == pytest.approx(10.0)
    assert len(epoch.cameras) == 6
    assert [c.camera_id for c in epoch.cameras] == list(range(6))
    assert all(c.epoch_time == epoch.time for c in epoch.cameras)

    orbit = build_epochs(setup.model_copy(update={"kind": "orbit"}), small_grid)
    assert make_baseline_epoch(orbit, time=0.0).time == 0.0


def test_sun_path_is_interpolated(small_grid):
    setup = SetupConfig(
        n_sats=1, n_epochs=3, image_size=3, desk_scale=0.01, sun_zenith_start=20.0, sun_zenith_end=40.0
    )
    epochs = build_epochs(setup, small_grid)
    assert epochs[0].sun_zenith == pytest.approx(math.radians(20.0))
    assert epochs[1].sun_zenith == pytest.approx(math.radians(30.0))
    assert epochs[2].sun_zenith == pytest.approx(math.radians(40.0))


def test_fit_image_size_covers_grid(small_grid):
    position = small_grid.center + np.array([0.0, 0.0, 2000.0])
    size = fit_image_size(small_grid, position, 0.01)
    assert size % 2 == 1
    # half diagonal of the box seen from 1850 m above its center
    half_angle = math.atan(math.hypot(200.0, 200.0) / 1850.0)
    assert (size - 1) / 2 * 0.01 >= half_angle


def test_fan_epoch_extent():
    epoch = make_fan_epoch(math.radians(60.0), 5, 3000.0, (0.0, 0.0, 500.0), image_size=3)
    assert len(epoch.cameras) == 5
    assert angular_extent([epoch], (0.0, 0.0, 500.0)) == pytest.approx(math.radians(60.0))
    with pytest.raises(InvalidInputError):
        make_fan_epoch(math.pi, 3, 3000.0, (0.0, 0.0, 0.0), image_size=3)


def test_orbit_setup_b_spans_one_radian_at_mid_time(small_grid):
    setup = setup_preset("B").model_copy(update={"image_size": 3})
    epochs = build_epochs(setup, small_grid)
    assert all(len(e.cameras) == 2 for e in epochs)
    extent = math.degrees(angular_extent([epochs[len(epochs) // 2]], small_grid.center))
    assert extent == pytest.approx(57.3, abs=1.0)


def test_pushbroom_preset_spans_130_degrees_over_400_seconds(small_grid):
    epochs = build_epochs(setup_preset("C").model_copy(update={"image_size": 3}), small_grid)
    assert epochs[-1].time - epochs[0].time == pytest.approx(400.0)
    assert math.degrees(angular_extent(epochs, small_grid.center)) == pytest.approx(130.0, abs=1e-6)


def test_camera_rejects_non_orthonormal_orientation():
    camera = make_camera((0.0, 0.0, 1000.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 3, 3, 0.01)
    with pytest.raises(ValidationError):
        Camera(**{**camera.model_dump(), "forward": (0.0, 0.0, -3.0)})
    with pytest.raises(ValidationError):
        Camera(**{**camera.model_dump(), "up": (1.0, 1.0, 0.0)})
    with pytest.raises(ValidationError):
        Camera(**{**camera.model_dump(), "right": (0.0, 5.0, 0.0)})


def test_view_epoch_rejects_non_unit_sun():
    camera = make_camera((0.0, 0.0, 1000.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 3, 3, 0.01)
    ViewEpoch(time=0.0, cameras=(camera,), sun_direction=(0.0, 0.6, -0.8))
    with pytest.raises(ValidationError):
        ViewEpoch(time=0.0, cameras=(camera,), sun_direction=(0.0, 0.0, 2.0))
    with pytest.raises(ValidationError):
        ViewEpoch(time=0.0, cameras=(camera,), sun_direction=(0.0, 0.0, 1.0 + 1e-9))


def test_build_epochs_logs_the_acquisition(small_grid, caplog):
    with caplog.at_level(logging.INFO, logger="src.geometry"):
        build_epochs(SetupConfig(n_sats=2, n_epochs=3, image_size=3, desk_scale=0.01), small_grid)
        build_epochs(setup_preset("C").model_copy(update={"image_size": 3}), small_grid)
    assert "Built 3 orbit view epochs of 2 cameras" in caplog.text
    assert "Built 21 pushbroom view epochs" in caplog.text
