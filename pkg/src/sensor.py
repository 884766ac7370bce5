"""Raw readout of rendered images: shot noise, readout noise, saturation, quantization."""

import logging

import numpy as np

from .errors import InvalidInputError
from .forward import ImageSet, RenderWorkspace, render
from .geometry import ViewEpoch
from .grid import FieldSequence
from .schema import OpticsModel, SensorModel

logger = logging.getLogger(__name__)


def image_rng(seed: int, epoch_index: int, camera_index: int) -> np.random.Generator:
    """PCG64 substream for one (epoch, camera) image."""
    sequence = np.random.SeedSequence(seed, spawn_key=(epoch_index, camera_index))
    return np.random.Generator(np.random.PCG64(sequence))


def quantize(electrons: np.ndarray, model: SensorModel) -> np.ndarray:
    """Round to the nearest of 2^bits levels spanning [0, full_well]."""
    step = model.full_well / (2**model.bits - 1)
    levels = np.rint(np.clip(electrons, 0.0, model.full_well) / step)
    return levels * step


def readout(expected: np.ndarray, model: SensorModel, rng: np.random.Generator) -> np.ndarray:
    electrons = rng.poisson(expected * model.electrons_per_unit).astype(float)
    if model.readout_sigma > 0:
        electrons += rng.normal(0.0, model.readout_sigma, size=electrons.shape)
    return quantize(electrons, model) / model.electrons_per_unit


def apply_noise(expected: ImageSet, model: SensorModel, epoch_index: int = 0) -> ImageSet:
    images = []
    for camera_index, image in enumerate(expected.images):
        if np.any(image < 0):
            raise InvalidInputError("expected intensities must be nonnegative")
        rng = image_rng(model.seed, epoch_index, camera_index)
        images.append(readout(image, model, rng))

    ceiling = float(quantize(np.array(model.full_well), model)) / model.electrons_per_unit
    saturated = sum(int((image >= ceiling).sum()) for image in images)
    if saturated:
        logger.warning("%d pixels saturated at t=%g", saturated, expected.time)
    return ImageSet(time=expected.time, images=tuple(images))


def acquire(
    truth: FieldSequence,
    epochs: list[ViewEpoch],
    optics: OpticsModel,
    sensor: SensorModel | None = None,
    gain: float | None = None,
) -> list[ImageSet]:
    """Images of every epoch, rendered from the truth at the epoch time, optionally read out through the sensor."""
    workspace = RenderWorkspace.for_grid(truth.grid, optics)
    data = []
    for k, epoch in enumerate(epochs):
        expected = render(truth.at(epoch.time), epoch, optics, gain, workspace)
        data.append(expected if sensor is None else apply_noise(expected, sensor, epoch_index=k))
    return data
