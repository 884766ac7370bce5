"""4D tomography: recover hidden fields whose temporal blend explains every epoch's images.

Each epoch t is explained by the synthesized state beta_t = sum_t' W[t, t'] h_t'.
The cost is sum_t 1/2 |F(beta_t) - y_t|^2 and its gradient with respect to a
hidden field is g_t = sum_t' W[t', t] G_t', with G_t' the render gradient of
epoch t'. Hidden fields are optimized under box bounds with L-BFGS-B or with
projected gradient descent.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize

from .errors import InvalidInputError, NumericError, ShapeMismatchError
from .forward import ImageSet, RenderWorkspace, render, render_with_adjoint
from .geometry import ViewEpoch
from .grid import CarveMask, ExtinctionField, FieldSequence, VoxelGrid
from .metrics import image_fit_error, mass_bias, rel_error
from .parallel import ordered_map
from .schema import OpticsModel, ReconConfig
from .temporal import INFINITE, TemporalKernel, combine, format_sigma, kernel_build, synthesize_all

logger = logging.getLogger(__name__)


@dataclass
class ReconState:
    kernel: TemporalKernel
    hidden: FieldSequence
    synthesized: FieldSequence
    cost_history: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    # one row per iteration: iter, cost, grad_norm and truth metrics when known
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.hidden.times != self.synthesized.times or self.hidden.times != self.kernel.times:
            raise ShapeMismatchError("hidden and synthesized sequences must share the kernel times")
        self.hidden.grid.require_compatible(self.synthesized.grid)

    @classmethod
    def from_hidden(cls, kernel: TemporalKernel, hidden: FieldSequence) -> "ReconState":
        return cls(kernel=kernel, hidden=hidden, synthesized=synthesize_all(kernel, hidden))

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log)


def _state_indices(times: tuple[float, ...], epochs: list[ViewEpoch]) -> list[int]:
    """Index of the state imaged by each epoch."""
    lookup = np.asarray(times)
    indices = []
    for epoch in epochs:
        k = int(np.argmin(np.abs(lookup - epoch.time)))
        if abs(lookup[k] - epoch.time) > 1e-9 * max(1.0, abs(epoch.time)):
            raise ShapeMismatchError(f"no state at epoch time {epoch.time}")
        indices.append(k)
    return indices


def _require_data(data: list[ImageSet], epochs: list[ViewEpoch]) -> None:
    if len(epochs) == 0:
        raise InvalidInputError("reconstruction needs at least one epoch")
    if len(data) != len(epochs):
        raise ShapeMismatchError(f"{len(data)} image sets for {len(epochs)} epochs")
    for images, epoch in zip(data, epochs):
        images.require_matches(epoch)


def _epoch_terms(
    grid: VoxelGrid,
    states: np.ndarray,
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    indices: list[int],
    optics: OpticsModel,
    gain: float | None,
    workspace: RenderWorkspace,
    want_gradient: bool,
) -> tuple[float, np.ndarray | None]:
    """Total data cost and per-state render gradients G (n_state, n_voxel), epochs reduced in order."""

    def evaluate(k: int):
        beta = ExtinctionField(grid, states[indices[k]])
        if want_gradient:
            _, cost, grad = render_with_adjoint(beta, epochs[k], optics, gain, data[k], workspace)
            return cost, grad.ravel(order="F")
        rendered = render(beta, epochs[k], optics, gain, workspace)
        residual = rendered.vector() - data[k].vector()
        return 0.5 * float(residual @ residual), None

    total = 0.0
    grads = np.zeros((states.shape[0], grid.size)) if want_gradient else None
    for k, (cost, grad) in enumerate(ordered_map(evaluate, range(len(epochs)))):
        total += cost
        if want_gradient:
            grads[indices[k]] += grad
    return total, grads


def _synthesize(kernel: TemporalKernel, hidden: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """(n_state, nx, ny, nz) blended states from (n_state, n_voxel) hidden values."""
    return np.stack(
        [
            np.maximum(combine(kernel.weights[t], hidden), 0.0).reshape(grid.shape, order="F")
            for t in range(kernel.n_state)
        ]
    )


def _hidden_gradients(kernel: TemporalKernel, grads: np.ndarray) -> np.ndarray:
    return np.stack([combine(kernel.weights[:, t], grads) for t in range(kernel.n_state)])


def cost(
    state: ReconState,
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    optics: OpticsModel,
    gain: float | None = None,
) -> float:
    """sum_t 1/2 |y_t - F(beta_t)|^2 with beta_t blended from the hidden fields."""
    _require_data(data, epochs)
    grid = state.hidden.grid
    synthesized = synthesize_all(state.kernel, state.hidden)
    workspace = RenderWorkspace.for_grid(grid, optics)
    indices = _state_indices(state.kernel.times, epochs)
    total, _ = _epoch_terms(grid, synthesized.stack(), data, epochs, indices, optics, gain, workspace, False)
    return total


def grad_hidden_all(
    state: ReconState,
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    optics: OpticsModel,
    kernel: TemporalKernel | None = None,
    gain: float | None = None,
) -> np.ndarray:
    """Gradients with respect to every hidden field, shape (n_state, nx, ny, nz)."""
    _require_data(data, epochs)
    kernel = kernel or state.kernel
    if kernel.times != state.hidden.times:
        raise ShapeMismatchError("kernel times do not match the state times")
    grid = state.hidden.grid
    synthesized = synthesize_all(kernel, state.hidden)
    workspace = RenderWorkspace.for_grid(grid, optics)
    indices = _state_indices(kernel.times, epochs)
    _, grads = _epoch_terms(grid, synthesized.stack(), data, epochs, indices, optics, gain, workspace, True)
    hidden = _hidden_gradients(kernel, grads)
    return np.stack([g.reshape(grid.shape, order="F") for g in hidden])


def grad_hidden(
    state: ReconState,
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    optics: OpticsModel,
    kernel: TemporalKernel,
    t: int,
    gain: float | None = None,
) -> np.ndarray:
    """g_t = sum_t' w_t'(t) [F(beta_t') - y_t'] dF/dbeta_t', shaped like the grid."""
    if not 0 <= t < kernel.n_state:
        raise InvalidInputError(f"state index {t} out of range")
    return grad_hidden_all(state, data, epochs, optics, kernel, gain)[t]


class _Objective:
    """Cost and gradient over the concatenated hidden fields, remembering recent evaluations."""

    def __init__(
        self,
        kernel: TemporalKernel,
        grid: VoxelGrid,
        data: list[ImageSet],
        epochs: list[ViewEpoch],
        optics: OpticsModel,
        gain: float | None,
        free: np.ndarray,
    ):
        self.kernel = kernel
        self.grid = grid
        self.data = data
        self.epochs = epochs
        self.optics = optics
        self.gain = gain
        self.free = free
        self.workspace = RenderWorkspace.for_grid(grid, optics)
        self.indices = _state_indices(kernel.times, epochs)
        self.evaluations = 0
        self._recent: OrderedDict[bytes, tuple[float, np.ndarray]] = OrderedDict()

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        key = x.tobytes()
        if key in self._recent:
            return self._recent[key]
        hidden = x.reshape(self.kernel.n_state, self.grid.size)
        states = _synthesize(self.kernel, hidden, self.grid)
        total, grads = _epoch_terms(
            self.grid, states, self.data, self.epochs, self.indices, self.optics, self.gain, self.workspace, True
        )
        gradient = _hidden_gradients(self.kernel, grads) * self.free
        self.evaluations += 1
        if not math.isfinite(total) or not np.all(np.isfinite(gradient)):
            raise NumericError(
                f"non-finite cost or gradient at evaluation {self.evaluations} (cost={total})"
            )
        result = (total, gradient.ravel())
        self._recent[key] = result
        while len(self._recent) > 4:
            self._recent.popitem(last=False)
        return result

    def states(self, x: np.ndarray) -> FieldSequence:
        hidden = x.reshape(self.kernel.n_state, self.grid.size)
        return FieldSequence.from_stack(self.grid, list(self.kernel.times), _synthesize(self.kernel, hidden, self.grid))

    def hidden(self, x: np.ndarray) -> FieldSequence:
        hidden = x.reshape(self.kernel.n_state, self.grid.size)
        stack = np.stack([h.reshape(self.grid.shape, order="F") for h in hidden])
        return FieldSequence.from_stack(self.grid, list(self.kernel.times), stack)


class _History:
    def __init__(self, objective: _Objective, truth: FieldSequence | None, tolerance: float):
        self.objective = objective
        self.truth = truth
        self.tolerance = tolerance
        self.costs: list[float] = []
        self.grad_norms: list[float] = []
        self.rows: list[dict] = []

    def record(self, x: np.ndarray) -> bool:
        """Log iterate x; True when the relative cost decrease fell below the tolerance."""
        total, gradient = self.objective(x)
        grad_norm = float(np.linalg.norm(gradient))
        iteration = len(self.costs)
        row = {"iter": iteration, "cost": total, "grad_norm": grad_norm}
        if self.truth is not None:
            states = self.objective.states(x)
            deltas, epsilons = [], []
            for t, (truth, est) in enumerate(zip(self.truth.states, states.states)):
                deltas.append(mass_bias(truth, est))
                epsilons.append(rel_error(truth, est))
                row[f"delta_{t}"] = deltas[-1]
                row[f"epsilon_{t}"] = epsilons[-1]
            row["delta"] = float(np.mean(deltas))
            row["epsilon"] = float(np.mean(epsilons))
        logger.info("iter %d cost %.6e |g| %.3e", iteration, total, grad_norm)

        previous = self.costs[-1] if self.costs else None
        self.costs.append(total)
        self.grad_norms.append(grad_norm)
        self.rows.append(row)
        if previous is None:
            return False
        return (previous - total) <= self.tolerance * max(abs(previous), np.finfo(float).tiny)


def _bounds(config: ReconConfig, free: np.ndarray) -> optimize.Bounds:
    free = free.ravel()
    lower = np.where(free, config.lower_bound, 0.0)
    upper = np.where(free, config.upper_bound, 0.0)
    return optimize.Bounds(lower, upper)


def _solve_lbfgsb(objective: _Objective, history: _History, x0: np.ndarray, config: ReconConfig) -> np.ndarray:
    def callback(xk):
        if history.record(xk):
            raise StopIteration

    result = optimize.minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=_bounds(config, objective.free),
        callback=callback,
        options={
            "maxiter": config.max_iters,
            "maxcor": config.memory,
            "maxfun": 20 * config.max_iters,
            # the relative-decrease rule lives in the callback
            "ftol": 0.0,
            "gtol": 1e-12,
        },
    )
    logger.info("L-BFGS-B stopped: %s", result.message)
    return np.asarray(result.x)


def _solve_projected_gradient(
    objective: _Objective, history: _History, x0: np.ndarray, config: ReconConfig
) -> np.ndarray:
    """x <- P(x - alpha g) with Armijo backtracking on alpha."""
    free = objective.free.ravel()
    lower = np.where(free, config.lower_bound, 0.0)
    upper = np.where(free, config.upper_bound, 0.0)
    x = x0
    for _ in range(config.max_iters):
        f, g = objective(x)
        alpha = config.step_size
        for _ in range(config.max_line_search):
            candidate = np.clip(x - alpha * g, lower, upper)
            f_new, _ = objective(candidate)
            if f_new <= f + config.armijo * float(g @ (candidate - x)):
                break
            alpha *= config.backtrack
        else:
            logger.warning("line search failed after %d trials", config.max_line_search)
            break
        x = candidate
        if history.record(x):
            break
    return x


def _initial_hidden(kernel: TemporalKernel, grid: VoxelGrid, config: ReconConfig, free: np.ndarray) -> np.ndarray:
    return np.tile(np.where(free, config.init_value, 0.0), kernel.n_state)


def reconstruct_4d(
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    config: ReconConfig,
    optics: OpticsModel,
    grid: VoxelGrid,
    gain: float | None = None,
    mask: CarveMask | None = None,
    truth: FieldSequence | None = None,
    times: list[float] | None = None,
) -> tuple[FieldSequence, ReconState]:
    """Recover one state per epoch time (or per `times`, when some states have no images)."""
    logger.info("Reconstruct 4D:\n%s", config.model_dump_json(indent=2))
    _require_data(data, epochs)
    kernel = kernel_build(times if times is not None else [epoch.time for epoch in epochs], config.sigma)
    if mask is not None:
        grid.require_compatible(mask.grid)
    if truth is not None:
        truth.grid.require_compatible(grid)
        if truth.times != kernel.times:
            raise ShapeMismatchError("truth times do not match the reconstruction times")

    free_voxels = np.ones(grid.size, dtype=bool) if mask is None else mask.flags.ravel(order="F")
    free = np.tile(free_voxels, kernel.n_state)
    objective = _Objective(kernel, grid, data, epochs, optics, gain, free.reshape(kernel.n_state, grid.size))
    history = _History(objective, truth, config.tolerance)

    x0 = _initial_hidden(kernel, grid, config, free_voxels)
    history.record(x0)
    if config.solver == "lbfgsb":
        x = _solve_lbfgsb(objective, history, x0, config)
    else:
        x = _solve_projected_gradient(objective, history, x0, config)
    x = np.clip(x, np.where(free, config.lower_bound, 0.0), np.where(free, config.upper_bound, 0.0))

    state = ReconState(
        kernel=kernel,
        hidden=objective.hidden(x),
        synthesized=objective.states(x),
        cost_history=history.costs,
        grad_norms=history.grad_norms,
        log=history.rows,
    )
    logger.info(
        "sigma=%s: cost %.6e -> %.6e in %d iterations (%d evaluations)",
        format_sigma(config.sigma),
        history.costs[0],
        history.costs[-1],
        len(history.costs) - 1,
        objective.evaluations,
    )
    return state.synthesized, state


def reconstruct_static(
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    config: ReconConfig,
    optics: OpticsModel,
    grid: VoxelGrid,
    gain: float | None = None,
    mask: CarveMask | None = None,
) -> ExtinctionField:
    """The sigma = inf solution: one state explaining every epoch, returned at the middle index."""
    static = config.model_copy(update={"sigma": INFINITE})
    states, _ = reconstruct_4d(data, epochs, static, optics, grid, gain, mask)
    return states.states[(len(states) - 1) // 2]


def cross_validate(
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    held_out: tuple[int, int],
    config: ReconConfig,
    optics: OpticsModel,
    grid: VoxelGrid,
    gain: float | None = None,
    mask: CarveMask | None = None,
) -> pd.DataFrame:
    """Fit error of one excluded view, rendered from 4D and static recoveries without it."""
    _require_data(data, epochs)
    epoch_index, camera_index = held_out
    if not 0 <= epoch_index < len(epochs) or not 0 <= camera_index < len(epochs[epoch_index].cameras):
        raise InvalidInputError(f"held-out view {held_out} does not exist")

    held_epoch = epochs[epoch_index]
    held_camera = held_epoch.cameras[camera_index]
    held_view = held_epoch.model_copy(update={"cameras": (held_camera,)})
    held_images = ImageSet(time=held_epoch.time, images=(data[epoch_index].images[camera_index],))

    train_epochs, train_data = [], []
    for k, (epoch, images) in enumerate(zip(epochs, data)):
        if k == epoch_index:
            cameras = tuple(c for i, c in enumerate(epoch.cameras) if i != camera_index)
            if not cameras:
                continue
            epoch = epoch.model_copy(update={"cameras": cameras})
            images = ImageSet(time=images.time, images=tuple(im for i, im in enumerate(images.images) if i != camera_index))
        train_epochs.append(epoch)
        train_data.append(images)
    times = [epoch.time for epoch in epochs]

    rows = []
    sigmas = [config.sigma] if config.sigma == INFINITE else [config.sigma, INFINITE]
    for sigma in sigmas:
        run = config.model_copy(update={"sigma": sigma})
        states, _ = reconstruct_4d(train_data, train_epochs, run, optics, grid, gain, mask, times=times)
        rendered = render(states.states[epoch_index], held_view, optics, gain)
        fit, normalized = image_fit_error(held_images, rendered)
        rows.append({"sigma": format_sigma(sigma), "fit_error": fit, "normalized_fit_error": normalized})
    return pd.DataFrame(rows)


def check_gradient(
    state: ReconState,
    data: list[ImageSet],
    epochs: list[ViewEpoch],
    optics: OpticsModel,
    gain: float | None = None,
    n_samples: int = 10,
    h: float = 1e-3,
    seed: int = 0,
) -> pd.DataFrame:
    """Central finite differences of the cost against grad_hidden at sampled hidden voxels."""
    analytic = grad_hidden_all(state, data, epochs, optics, state.kernel, gain)
    rng = np.random.default_rng(seed)
    grid = state.hidden.grid
    stack = state.hidden.stack()
    rows = []
    for _ in range(n_samples):
        t = int(rng.integers(state.kernel.n_state))
        voxel = tuple(int(rng.integers(n)) for n in grid.shape)
        values = []
        for sign in (1.0, -1.0):
            shifted = stack.copy()
            shifted[(t,) + voxel] = max(shifted[(t,) + voxel] + sign * h, 0.0)
            hidden = FieldSequence.from_stack(grid, list(state.kernel.times), shifted)
            values.append((cost(ReconState.from_hidden(state.kernel, hidden), data, epochs, optics, gain), shifted[(t,) + voxel]))
        (f_plus, x_plus), (f_minus, x_minus) = values
        numeric = (f_plus - f_minus) / (x_plus - x_minus)
        exact = float(analytic[(t,) + voxel])
        scale = max(abs(exact), abs(numeric), 1e-12)
        rows.append(
            {"t": t, "voxel": voxel, "analytic": exact, "numeric": numeric, "rel_error": abs(exact - numeric) / scale}
        )
    frame = pd.DataFrame(rows)
    logger.info("gradient check: max relative error %.3e", frame["rel_error"].max())
    return frame
