"""Hidden-field temporal representation and temporal sampling analysis.

Each instantaneous state is a convex combination of hidden fields,

    beta_t = sum_t' w_t(t') * beta_hidden_t',    w_t(t') = s * exp(-|t - t'|^2 / (2 sigma^2)),

with s normalizing every row of the weight matrix to 1. sigma = "inf" gives
uniform rows, i.e. the static solution.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import pandas as pd
from scipy import signal

from .errors import InvalidInputError, ShapeMismatchError
from .grid import ExtinctionField, FieldSequence

logger = logging.getLogger(__name__)

INFINITE: Literal["inf"] = "inf"
Sigma = float | Literal["inf"]


def parse_sigma(value: str | float) -> Sigma:
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinite", "∞"):
        return INFINITE
    sigma = float(value)
    if math.isinf(sigma) and sigma > 0:
        return INFINITE
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive or 'inf', got {value!r}")
    return sigma


def format_sigma(sigma: Sigma) -> str:
    return INFINITE if sigma == INFINITE else f"{sigma:g}"


@dataclass(frozen=True)
class TemporalKernel:
    times: tuple[float, ...]
    sigma: Sigma
    # weights[t, t'] = w_t(t')
    weights: np.ndarray
    # per-row normalizer s
    normalizers: np.ndarray

    @property
    def n_state(self) -> int:
        return len(self.times)


def kernel_build(times, sigma: Sigma) -> TemporalKernel:
    times = tuple(float(t) for t in times)
    if len(times) == 0:
        raise InvalidInputError("kernel needs at least one time")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidInputError("kernel times must be strictly increasing")
    n = len(times)

    if sigma == INFINITE:
        weights = np.full((n, n), 1.0 / n)
        normalizers = np.full(n, 1.0 / n)
    else:
        sigma = float(sigma)
        if not sigma > 0:
            raise InvalidInputError(f"sigma must be positive, got {sigma}")
        t = np.asarray(times)
        lag = t[:, None] - t[None, :]
        raw = np.exp(-(lag**2) / (2.0 * sigma**2))
        normalizers = 1.0 / raw.sum(axis=1)
        weights = raw * normalizers[:, None]

    logger.debug("Temporal kernel over %d times, sigma %s", n, format_sigma(sigma))
    weights.setflags(write=False)
    return TemporalKernel(times=times, sigma=sigma, weights=weights, normalizers=normalizers)


def combine(weights_row: np.ndarray, stack: np.ndarray) -> np.ndarray:
    """sum_t' w[t'] * stack[t'], accumulated in t' order.

    A fixed accumulation order makes equal rows give bit-identical results.
    """
    out = np.zeros(stack.shape[1:])
    for w, values in zip(weights_row, stack):
        out += w * values
    return out


def _require_same_times(kernel: TemporalKernel, times) -> None:
    if tuple(float(t) for t in times) != kernel.times:
        raise ShapeMismatchError("hidden field times do not match kernel times")


def synthesize_state(kernel: TemporalKernel, hidden: FieldSequence, t: int) -> ExtinctionField:
    _require_same_times(kernel, hidden.times)
    values = combine(kernel.weights[t], hidden.stack())
    return ExtinctionField(hidden.grid, np.maximum(values, 0.0))


def synthesize_all(kernel: TemporalKernel, hidden: FieldSequence) -> FieldSequence:
    _require_same_times(kernel, hidden.times)
    stack = hidden.stack()
    states = [
        ExtinctionField(hidden.grid, np.maximum(combine(kernel.weights[t], stack), 0.0))
        for t in range(kernel.n_state)
    ]
    return FieldSequence(hidden.times, tuple(states))


@dataclass(frozen=True)
class SpectrumReport:
    frequencies: np.ndarray
    power: np.ndarray
    cutoff: float
    contained_fraction: float

    @property
    def bin_width(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0]) if len(self.frequencies) > 1 else 0.0

    def cumulative_fraction(self) -> np.ndarray:
        """Cumulative share of the non-DC power up to each frequency (0 at DC)."""
        varying = self.power.copy()
        varying[0] = 0.0
        total = varying.sum()
        if total <= 0:
            return np.zeros_like(varying)
        return np.cumsum(varying) / total

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "frequency_hz": self.frequencies,
                "power": self.power,
                "cumulative_fraction": self.cumulative_fraction(),
            }
        )


def spectrum_cutoff(
    series: np.ndarray, sample_period: float, window: int = 64, fraction: float = 0.95
) -> SpectrumReport:
    """Aggregate short-time power spectrum of per-voxel time series.

    `series` is (n_series, n_samples). Power is summed over series and over
    Hann-windowed segments with 50% overlap. The cutoff is the smallest
    frequency holding `fraction` of the non-DC power.
    """
    series = np.atleast_2d(np.asarray(series, dtype=float))
    if series.size == 0 or series.shape[-1] == 0:
        raise InvalidInputError("empty series")
    if not 0 < fraction <= 1:
        raise InvalidInputError(f"fraction must be in (0, 1], got {fraction}")
    if not sample_period > 0:
        raise InvalidInputError(f"sample period must be positive, got {sample_period}")
    n_samples = series.shape[-1]
    if window < 2 or window > n_samples:
        raise InvalidInputError(f"window {window} must be in [2, {n_samples}]")

    stft_args = dict(
        fs=1.0 / sample_period,
        window="hann",
        nperseg=window,
        noverlap=window // 2,
        boundary=None,
        padded=False,
        axis=-1,
    )
    frequencies, _, varying = signal.stft(series, detrend="constant", **stft_args)
    _, _, raw = signal.stft(series, detrend=False, **stft_args)

    power = (np.abs(varying) ** 2).sum(axis=(0, 2))
    power[0] = (np.abs(raw[:, 0, :]) ** 2).sum()

    report = SpectrumReport(frequencies=frequencies, power=power, cutoff=0.0, contained_fraction=fraction)
    cumulative = report.cumulative_fraction()
    cutoff = 0.0
    if cumulative[-1] > 0:
        # small tolerance keeps fraction=1 reachable despite rounding in cumsum
        cutoff = float(frequencies[int(np.argmax(cumulative >= fraction - 1e-12))])
    return SpectrumReport(frequencies=frequencies, power=power, cutoff=cutoff, contained_fraction=fraction)


def nyquist_period(cutoff: float) -> float:
    """Longest sampling period that still samples a band of half-width `cutoff` Hz."""
    if not cutoff > 0:
        raise InvalidInputError(f"cutoff must be positive, got {cutoff}")
    return 1.0 / (2.0 * cutoff)


def sigma_from_cutoff(cutoff: float) -> float:
    """Recommended kernel width for a temporal band limit B: sigma ~ 1/(2B)."""
    if not cutoff > 0:
        raise InvalidInputError(f"cutoff must be positive, got {cutoff}")
    return 1.0 / (2.0 * cutoff)


def angular_rate_figure(theta: float, dt: float, sigma: float) -> float:
    """rho = (2 Theta / pi) * (sigma / |t - t'|); rho >~ 1 is needed for good 4D recovery."""
    if dt == 0:
        raise InvalidInputError("time separation must be nonzero")
    if not 0 <= theta <= 2 * math.pi:
        raise InvalidInputError(f"angular extent must be in [0, 2pi], got {theta}")
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    return (2.0 * theta / math.pi) * (sigma / abs(dt))
