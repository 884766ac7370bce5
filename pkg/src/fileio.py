"""File formats: one canonical JSON header line, then a little-endian binary body.

    T4DF  field sequence   float32, states in time order, x-fastest voxels
    T4DI  one image        float32, row-major
    T4DM  carve mask       uint8 per voxel, x-fastest

An image directory holds `epoch{k:03d}_cam{c:02d}.t4di` files next to the
`epochs.json` view geometry. Every write goes to a temporary file in the
target directory and is renamed into place.
"""

import hashlib
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from cuid2 import cuid_wrapper

from .errors import FileFormatError, T4DError
from .forward import ImageSet
from .geometry import ViewEpoch, ViewEpochs
from .grid import CarveMask, ExtinctionField, FieldSequence, VoxelGrid
from .schema import RunManifest

logger = logging.getLogger(__name__)

VERSION = 1
FIELD_MAGIC = "T4DF"
IMAGE_MAGIC = "T4DI"
MASK_MAGIC = "T4DM"
EPOCHS_FILE = "epochs.json"

cuid_generator: Callable[[], str] = cuid_wrapper()


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_frame(path: str | Path, frame: pd.DataFrame) -> None:
    atomic_write(path, frame.to_csv(index=False).encode())


def _header_bytes(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode()


def _split(payload: bytes, magic: str, path) -> tuple[dict, bytes]:
    end = payload.find(b"\n")
    if end < 0:
        raise FileFormatError(f"{path}: missing header line")
    try:
        header = json.loads(payload[:end])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FileFormatError(f"{path}: malformed header ({e})") from e
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise FileFormatError(f"{path}: not a {magic} file")
    if header.get("version") != VERSION:
        raise FileFormatError(f"{path}: unsupported version {header.get('version')}")
    return header, payload[end + 1 :]


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as e:
        raise FileFormatError(f"{path}: no such file") from e


def _grid_header(grid: VoxelGrid) -> dict:
    return grid.model_dump(mode="json")


def _grid_from_header(header: dict, path) -> VoxelGrid:
    try:
        return VoxelGrid.model_validate(header["grid"])
    except (KeyError, ValueError) as e:
        raise FileFormatError(f"{path}: bad grid ({e})") from e


def _floats(body: bytes, count: int, path) -> np.ndarray:
    if len(body) != 4 * count:
        raise FileFormatError(f"{path}: body has {len(body)} bytes, expected {4 * count}")
    return np.frombuffer(body, dtype="<f4").astype(float)


def field_bytes(seq: FieldSequence) -> bytes:
    header = {
        "magic": FIELD_MAGIC,
        "version": VERSION,
        "grid": _grid_header(seq.grid),
        "times": list(seq.times),
        "dtype": "f32le",
        "order": "x-fastest",
    }
    body = b"".join(state.flat().astype("<f4").tobytes() for state in seq.states)
    return _header_bytes(header) + body


def write_field(path: str | Path, seq: FieldSequence) -> None:
    """Values are stored as f32le; only float32-representable fields read back unchanged."""
    atomic_write(path, field_bytes(seq))


def read_field(path: str | Path) -> FieldSequence:
    header, body = _split(_read(path), FIELD_MAGIC, path)
    grid = _grid_from_header(header, path)
    times = header.get("times")
    if not isinstance(times, list) or not times:
        raise FileFormatError(f"{path}: missing times")
    values = _floats(body, len(times) * grid.size, path).reshape(len(times), grid.size)
    try:
        return FieldSequence(tuple(times), tuple(ExtinctionField.from_flat(grid, v) for v in values))
    except T4DError as e:
        raise FileFormatError(f"{path}: {e}") from e


def write_image(path: str | Path, image: np.ndarray, time: float, camera_id: int) -> None:
    image = np.asarray(image, dtype=float)
    rows, cols = image.shape
    header = {
        "magic": IMAGE_MAGIC,
        "version": VERSION,
        "time": time,
        "camera_id": camera_id,
        "rows": rows,
        "cols": cols,
        "dtype": "f32le",
    }
    atomic_write(path, _header_bytes(header) + image.astype("<f4").tobytes())


def read_image(path: str | Path) -> tuple[float, int, np.ndarray]:
    header, body = _split(_read(path), IMAGE_MAGIC, path)
    try:
        rows, cols = int(header["rows"]), int(header["cols"])
        time, camera_id = float(header["time"]), int(header["camera_id"])
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"{path}: bad image header ({e})") from e
    return time, camera_id, _floats(body, rows * cols, path).reshape(rows, cols)


def image_name(epoch_index: int, camera_index: int) -> str:
    return f"epoch{epoch_index:03d}_cam{camera_index:02d}.t4di"


def write_epochs(path: str | Path, epochs: list[ViewEpoch]) -> None:
    atomic_write(path, ViewEpochs(epochs=epochs).model_dump_json(indent=2).encode())


def read_epochs(path: str | Path) -> list[ViewEpoch]:
    return ViewEpochs.model_validate_json(_read(path)).epochs


def write_images(directory: str | Path, data: list[ImageSet], epochs: list[ViewEpoch]) -> list[Path]:
    directory = Path(directory)
    written = []
    for k, (images, epoch) in enumerate(zip(data, epochs)):
        images.require_matches(epoch)
        for c, (camera, image) in enumerate(zip(epoch.cameras, images.images)):
            path = directory / image_name(k, c)
            write_image(path, image, epoch.time, camera.camera_id)
            written.append(path)
    write_epochs(directory / EPOCHS_FILE, epochs)
    written.append(directory / EPOCHS_FILE)
    return written


def read_images(directory: str | Path) -> tuple[list[ImageSet], list[ViewEpoch]]:
    directory = Path(directory)
    epochs = read_epochs(directory / EPOCHS_FILE)
    data = []
    for k, epoch in enumerate(epochs):
        images = []
        for c in range(len(epoch.cameras)):
            path = directory / image_name(k, c)
            time, _, image = read_image(path)
            if abs(time - epoch.time) > 1e-9 * max(1.0, abs(epoch.time)):
                raise FileFormatError(f"{path}: time {time} does not match epoch {epoch.time}")
            images.append(image)
        image_set = ImageSet(time=epoch.time, images=tuple(images))
        try:
            image_set.require_matches(epoch)
        except T4DError as e:
            raise FileFormatError(f"{directory}: {e}") from e
        data.append(image_set)
    return data, epochs


def write_mask(path: str | Path, mask: CarveMask) -> None:
    header = {"magic": MASK_MAGIC, "version": VERSION, "grid": _grid_header(mask.grid), "dtype": "u8", "order": "x-fastest"}
    body = mask.flags.ravel(order="F").astype(np.uint8).tobytes()
    atomic_write(path, _header_bytes(header) + body)


def read_mask(path: str | Path) -> CarveMask:
    header, body = _split(_read(path), MASK_MAGIC, path)
    grid = _grid_from_header(header, path)
    if len(body) != grid.size:
        raise FileFormatError(f"{path}: body has {len(body)} bytes, expected {grid.size}")
    flags = np.frombuffer(body, dtype=np.uint8)
    if np.any(flags > 1):
        raise FileFormatError(f"{path}: mask bytes must be 0 or 1")
    return CarveMask(grid, flags.astype(bool).reshape(grid.shape, order="F"))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def new_manifest(command: str, argv: list[str]) -> RunManifest:
    return RunManifest(
        run_id=cuid_generator(),
        command=command,
        argv=list(argv),
        created_at=datetime.now(timezone.utc).isoformat(),
    )


def record_outputs(manifest: RunManifest, outputs: dict[str, str | Path]) -> None:
    """Add output paths and their content hashes; directories hash every file inside."""
    for name, path in outputs.items():
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
        for file in files:
            key = name if file == path else f"{name}/{file.name}"
            manifest.outputs[key] = str(file)
            manifest.output_hashes[key] = file_sha256(file)


def write_manifest(path: str | Path, manifest: RunManifest) -> None:
    atomic_write(path, manifest.model_dump_json(indent=2).encode())


def read_manifest(path: str | Path) -> RunManifest:
    return RunManifest.model_validate_json(_read(path))
