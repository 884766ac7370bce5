import numpy as np
import pytest

from conftest import fan_epoch, random_field
from src.errors import InvalidInputError, ShapeMismatchError
from src.forward import render
from src.geometry import build_epochs
from src.grid import CarveMask, ExtinctionField, FieldSequence, VoxelGrid
from src.metrics import rel_error
from src.phantom import generate
from src.recon import (
    ReconState,
    check_gradient,
    cost,
    cross_validate,
    grad_hidden,
    grad_hidden_all,
    reconstruct_4d,
    reconstruct_static,
)
from src.schema import Blob, OpticsModel, PhantomSpec, ReconConfig, SetupConfig
from src.sensor import acquire
from src.temporal import INFINITE, kernel_build


def _problem(grid, optics, times=(0.0, 10.0, 20.0), seed=0):
    truth = FieldSequence(tuple(times), tuple(random_field(grid, seed=seed + i) for i in range(len(times))))
    epochs = [fan_epoch(grid, time=t, extent_deg=40.0 + 10.0 * i) for i, t in enumerate(times)]
    return truth, epochs, acquire(truth, epochs, optics)


@pytest.mark.parametrize("mode", ["linear", "single_scatter"])
@pytest.mark.parametrize("seed", [0, 1])
def test_hidden_gradient_matches_finite_differences(small_grid, mode, seed):
    optics = OpticsModel(mode=mode, phase_g=0.7, air_extinction=0.02, surface_albedo=0.05)
    _, epochs, data = _problem(small_grid, optics, seed=seed)
    kernel = kernel_build([e.time for e in epochs], 12.0)
    start = FieldSequence(kernel.times, tuple(random_field(small_grid, seed=50 + seed + i) for i in range(3)))
    state = ReconState.from_hidden(kernel, start)

    frame = check_gradient(state, data, epochs, optics, n_samples=6, h=1e-3, seed=seed)
    scale = frame["analytic"].abs().max()
    np.testing.assert_allclose(frame["numeric"], frame["analytic"], rtol=1e-4, atol=1e-8 * scale)


def test_grad_hidden_selects_one_state(small_grid, linear_optics):
    _, epochs, data = _problem(small_grid, linear_optics)
    kernel = kernel_build([e.time for e in epochs], 10.0)
    state = ReconState.from_hidden(kernel, FieldSequence(kernel.times, (ExtinctionField.full(small_grid, 1.0),) * 3))
    everything = grad_hidden_all(state, data, epochs, linear_optics)
    assert everything.shape == (3,) + small_grid.shape
    np.testing.assert_array_equal(grad_hidden(state, data, epochs, linear_optics, kernel, 1), everything[1])
    with pytest.raises(InvalidInputError):
        grad_hidden(state, data, epochs, linear_optics, kernel, 3)


def test_cost_is_zero_at_the_truth_for_identity_kernel(small_grid, linear_optics):
    truth, epochs, data = _problem(small_grid, linear_optics)
    state = ReconState.from_hidden(kernel_build(truth.times, 1e-9), truth)
    assert cost(state, data, epochs, linear_optics) == pytest.approx(0.0, abs=1e-20)


def test_data_must_match_epochs(small_grid, linear_optics):
    truth, epochs, data = _problem(small_grid, linear_optics)
    config = ReconConfig(max_iters=2)
    with pytest.raises(ShapeMismatchError):
        reconstruct_4d(data[:2], epochs, config, linear_optics, small_grid)
    with pytest.raises(InvalidInputError):
        reconstruct_4d([], [], config, linear_optics, small_grid)


def test_static_limit_equivalence(small_grid, linear_optics):
    static = random_field(small_grid, seed=3)
    times = (0.0, 10.0, 20.0)
    truth = FieldSequence(times, (static,) * 3)
    epochs = [fan_epoch(small_grid, time=t, extent_deg=30.0 + 15.0 * i) for i, t in enumerate(times)]
    data = acquire(truth, epochs, linear_optics)
    config = ReconConfig(sigma="inf", max_iters=15)

    states, state = reconstruct_4d(data, epochs, config, linear_optics, small_grid)
    for other in states.states[1:]:
        assert np.max(np.abs(other.values - states.states[0].values)) <= 1e-6
    assert state.cost_history[-1] < state.cost_history[0]

    single = reconstruct_static(data, epochs, config.model_copy(update={"sigma": 5.0}), linear_optics, small_grid)
    np.testing.assert_array_equal(single.values, states.states[1].values)


def test_reconstruction_lowers_cost_and_logs_metrics(small_grid, scatter_optics):
    truth, epochs, data = _problem(small_grid, scatter_optics)
    config = ReconConfig(sigma=10.0, max_iters=8, init_value=1.0)
    states, state = reconstruct_4d(data, epochs, config, scatter_optics, small_grid, truth=truth)
    assert states.times == truth.times
    assert state.cost_history[-1] < state.cost_history[0]
    assert len(state.cost_history) == len(state.grad_norms)

    frame = state.log_frame()
    assert {"iter", "cost", "grad_norm", "delta", "epsilon", "delta_0", "epsilon_2"} <= set(frame.columns)
    assert frame["iter"].tolist() == list(range(len(frame)))


def test_mask_and_bounds_are_respected(small_grid, linear_optics):
    truth, epochs, data = _problem(small_grid, linear_optics)
    flags = np.zeros(small_grid.shape, dtype=bool)
    flags[1:3, 1:3, :] = True
    config = ReconConfig(sigma=10.0, max_iters=6, upper_bound=2.0)
    states, state = reconstruct_4d(data, epochs, config, linear_optics, small_grid, mask=CarveMask(small_grid, flags))
    for est in states.states:
        assert np.all(est.values[~flags] == 0.0)
        assert np.all(est.values <= 2.0 + 1e-12)
    for hidden in state.hidden.states:
        assert np.all(hidden.values[~flags] == 0.0)


def test_projected_gradient_solver(small_grid, linear_optics):
    truth, epochs, data = _problem(small_grid, linear_optics)
    config = ReconConfig(sigma=10.0, max_iters=5, solver="projected_gradient", step_size=10.0)
    _, state = reconstruct_4d(data, epochs, config, linear_optics, small_grid)
    assert all(b <= a for a, b in zip(state.cost_history, state.cost_history[1:]))
    assert state.cost_history[-1] < state.cost_history[0]


def test_cross_validation_reports_both_solutions(small_grid, linear_optics):
    _, epochs, data = _problem(small_grid, linear_optics)
    frame = cross_validate(data, epochs, (1, 0), ReconConfig(sigma=10.0, max_iters=4), linear_optics, small_grid)
    assert frame["sigma"].tolist() == ["10", "inf"]
    assert (frame["fit_error"] >= 0).all()
    assert list(frame.columns) == ["sigma", "fit_error", "normalized_fit_error"]
    with pytest.raises(InvalidInputError):
        cross_validate(data, epochs, (5, 0), ReconConfig(), linear_optics, small_grid)


def test_cross_validation_can_hold_out_a_whole_epoch(small_grid, linear_optics):
    grid = small_grid
    times = (0.0, 10.0, 20.0)
    truth = FieldSequence(times, tuple(random_field(grid, seed=i) for i in range(3)))
    epochs = [fan_epoch(grid, time=t, n_views=1) for t in times]
    data = acquire(truth, epochs, linear_optics)
    frame = cross_validate(data, epochs, (1, 0), ReconConfig(sigma="inf", max_iters=3), linear_optics, grid)
    assert frame["sigma"].tolist() == ["inf"]


@pytest.mark.slow
def test_dynamic_recovery_beats_static():
    grid = VoxelGrid(nx=16, ny=16, nz=16, dx=80.0, dy=80.0, dz=80.0)
    spec = PhantomSpec(
        kind="translating_blob",
        blobs=[Blob(center=(640.0, 340.0, 640.0), radius=150.0)],
        velocity=(0.0, 10.0, 0.0),
        peak=20.0,
        duration=60.0,
        sample_period=10.0,
    )
    truth = generate(spec, grid)
    setup = SetupConfig(desk_scale=0.01, gsd=40.0)
    epochs = build_epochs(setup, grid)
    assert len(epochs) == 7
    optics = OpticsModel(mode="linear", surface_albedo=0.0)
    data = acquire(truth, epochs, optics)

    errors = {}
    for sigma in (20.0, INFINITE):
        config = ReconConfig(sigma=sigma, max_iters=60, init_value=0.0)
        states, _ = reconstruct_4d(data, epochs, config, optics, grid)
        errors[sigma] = float(np.mean([rel_error(t, e) for t, e in zip(truth.states, states.states)]))
    assert errors[20.0] < 0.9 * errors[INFINITE]


def test_recovered_state_reproduces_images(small_grid, linear_optics):
    truth, epochs, data = _problem(small_grid, linear_optics, times=(0.0,))
    states, _ = reconstruct_4d(data, epochs, ReconConfig(max_iters=30), linear_optics, small_grid)
    rendered = render(states.states[0], epochs[0], linear_optics)
    before = render(ExtinctionField.full(small_grid, 1.0), epochs[0], linear_optics)
    residual = np.linalg.norm(rendered.vector() - data[0].vector())
    assert residual < np.linalg.norm(before.vector() - data[0].vector())
