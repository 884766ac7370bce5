import numpy as np
import pandas as pd

from .errors import InvalidInputError, ShapeMismatchError
from .forward import ImageSet
from .grid import CarveMask, ExtinctionField, FieldSequence


def _l1(values: np.ndarray) -> float:
    return float(np.abs(values).sum())


def _truth_mass(truth: ExtinctionField, est: ExtinctionField, where: np.ndarray | None = None) -> float:
    truth.grid.require_compatible(est.grid)
    values = truth.values if where is None else truth.values[where]
    mass = _l1(values)
    if mass <= 0:
        raise InvalidInputError("ground truth has zero mass")
    return mass


def mass_bias(truth: ExtinctionField, est: ExtinctionField) -> float:
    """delta_t = (|truth|_1 - |est|_1) / |truth|_1."""
    mass = _truth_mass(truth, est)
    return (mass - _l1(est.values)) / mass


def rel_error(truth: ExtinctionField, est: ExtinctionField) -> float:
    """epsilon_t = |truth - est|_1 / |truth|_1."""
    mass = _truth_mass(truth, est)
    return _l1(truth.values - est.values) / mass


def masked_mass_bias(truth: ExtinctionField, est: ExtinctionField, mask: CarveMask) -> float:
    """mass_bias restricted to the voxels of a mask."""
    truth.grid.require_compatible(mask.grid)
    mass = _truth_mass(truth, est, mask.flags)
    return (mass - _l1(est.values[mask.flags])) / mass


def masked_rel_error(truth: ExtinctionField, est: ExtinctionField, mask: CarveMask) -> float:
    truth.grid.require_compatible(mask.grid)
    mass = _truth_mass(truth, est, mask.flags)
    return _l1(truth.values[mask.flags] - est.values[mask.flags]) / mass


def _require_aligned(truth_seq: FieldSequence, est_seq: FieldSequence) -> None:
    if truth_seq.times != est_seq.times:
        raise ShapeMismatchError("truth and estimate sequences have different times")
    truth_seq.grid.require_compatible(est_seq.grid)


def per_state_metrics(truth_seq: FieldSequence, est_seq: FieldSequence) -> pd.DataFrame:
    _require_aligned(truth_seq, est_seq)
    rows = [
        {"t": t, "delta_t": mass_bias(truth, est), "epsilon_t": rel_error(truth, est)}
        for t, truth, est in zip(truth_seq.times, truth_seq.states, est_seq.states)
    ]
    return pd.DataFrame(rows, columns=["t", "delta_t", "epsilon_t"])


def average_metrics(truth_seq: FieldSequence, est_seq: FieldSequence) -> tuple[float, float]:
    """(delta, epsilon): means of delta_t and epsilon_t over the sample times."""
    frame = per_state_metrics(truth_seq, est_seq)
    return float(frame["delta_t"].mean()), float(frame["epsilon_t"].mean())


def metrics_frame(truth_seq: FieldSequence, est_seq: FieldSequence) -> pd.DataFrame:
    """Per-state rows followed by a summary row with t = "mean"."""
    frame = per_state_metrics(truth_seq, est_seq)
    summary = pd.DataFrame(
        [{"t": "mean", "delta_t": frame["delta_t"].mean(), "epsilon_t": frame["epsilon_t"].mean()}]
    )
    frame["t"] = frame["t"].astype(object)
    return pd.concat([frame, summary], ignore_index=True)


def image_fit_error(measured: ImageSet, rendered: ImageSet) -> tuple[float, float]:
    """(1/2 |y - F|^2, |y - F|^2 / |y|^2) for one epoch's images."""
    y = measured.vector()
    f = rendered.vector()
    if y.shape != f.shape:
        raise ShapeMismatchError(f"{y.size} measured pixels vs {f.size} rendered")
    squared = float(((y - f) ** 2).sum())
    norm = float((y**2).sum())
    return 0.5 * squared, squared / norm if norm > 0 else float("inf")
