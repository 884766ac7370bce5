import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from . import fileio
from .carve import space_carve
from .errors import FileFormatError, NumericError, ShapeMismatchError, T4DError
from .forward import ImageSet, render_clear_sky
from .geometry import build_epochs
from .grid import VoxelGrid
from .metrics import metrics_frame
from .phantom import bandlimit_check, generate
from .preprocess import center_of_mass, cloud_height, estimate_albedo, estimate_drift, register_epochs
from .recon import cross_validate, reconstruct_4d
from .schema import (
    OpticsModel,
    PhantomSpec,
    ReconConfig,
    RunManifest,
    SensorModel,
    SetupConfig,
    ShadowObservation,
    setup_preset,
)
from .sensor import acquire
from .sweeps import SweepPoint, run_sweep
from .temporal import parse_sigma

logger = logging.getLogger(__name__)

EXIT_ERROR = 1
EXIT_FORMAT = 2
EXIT_NUMERIC = 3


class Outcome:
    """What a command produced, for its run manifest."""

    def __init__(self):
        self.outputs: dict[str, Path] = {}
        self.configs: dict = {}
        self.seeds: dict[str, int] = {}
        self.summary: dict = {}

    def config(self, name: str, model: BaseModel | None) -> None:
        if model is not None:
            self.configs[name] = model.model_dump(mode="json")


def _load(model: type[BaseModel], path: str | None, default: BaseModel | None = None):
    if path is None:
        return default if default is not None else model()
    return model.model_validate_json(Path(path).read_text())


def _setup(value: str, desk_scale: float | None) -> SetupConfig:
    try:
        setup = setup_preset(value)
    except ValueError:
        setup = _load(SetupConfig, value)
    if desk_scale is not None:
        setup = setup.model_copy(update={"desk_scale": desk_scale})
    return setup


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _extents(text: str) -> list[float]:
    """Comma list, or an inclusive range `a..b` (step 10) / `a..b..step`."""
    if ".." not in text:
        return _floats(text)
    parts = [float(v) for v in text.split("..")]
    start, stop = parts[0], parts[1]
    step = parts[2] if len(parts) > 2 else 10.0
    return list(np.arange(start, stop + step / 2, step))


def _manifest_path(args, out: str) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return Path(str(out).rstrip("/") + ".manifest.json")


def cmd_simulate(args, outcome: Outcome) -> None:
    spec = _load(PhantomSpec, args.spec)
    grid = _load(VoxelGrid, args.grid)
    truth = generate(spec, grid)
    fileio.write_field(args.out, truth)
    outcome.config("phantom", spec)
    outcome.config("grid", grid)
    outcome.seeds["phantom"] = spec.seed
    outcome.outputs["truth"] = Path(args.out)
    outcome.summary["n_state"] = len(truth)


def cmd_render(args, outcome: Outcome) -> None:
    truth = fileio.read_field(args.truth)
    setup = _setup(args.setup, args.desk_scale)
    optics = _load(OpticsModel, args.optics)
    sensor = _load(SensorModel, args.noise) if args.noise else None
    if sensor is not None and args.seed is not None:
        sensor = sensor.model_copy(update={"seed": args.seed})
    logger.info("Render setup:\n%s", setup.model_dump_json(indent=2))

    epochs = build_epochs(setup, truth.grid)
    data = acquire(truth, epochs, optics, sensor, args.gain)
    fileio.write_images(args.out, data, epochs)

    outcome.config("setup", setup)
    outcome.config("optics", optics)
    outcome.config("sensor", sensor)
    if sensor is not None:
        outcome.seeds["sensor"] = sensor.seed
    outcome.outputs["images"] = Path(args.out)
    outcome.summary["n_epochs"] = len(epochs)
    outcome.summary["n_pixels"] = int(sum(images.n_pixels for images in data))


def _recon_config(args) -> ReconConfig:
    config = _load(ReconConfig, args.config)
    if args.sigma is not None:
        config = config.model_copy(update={"sigma": parse_sigma(args.sigma)})
    if getattr(args, "mask", None):
        config = config.model_copy(update={"mask_path": args.mask})
    return config


def _observations(args):
    data, epochs = fileio.read_images(args.images)
    if getattr(args, "epochs", None):
        epochs = fileio.read_epochs(args.epochs)
        for images, epoch in zip(data, epochs):
            images.require_matches(epoch)
    return data, epochs


def cmd_reconstruct(args, outcome: Outcome) -> None:
    data, epochs = _observations(args)
    grid = _load(VoxelGrid, args.grid)
    if args.setup:
        setup = _setup(args.setup, args.desk_scale)
        epochs = build_epochs(setup, grid)
        if len(epochs) != len(data):
            raise ShapeMismatchError(f"setup has {len(epochs)} epochs, images have {len(data)}")
        for images, epoch in zip(data, epochs):
            images.require_matches(epoch)
        outcome.config("setup", setup)
    optics = _load(OpticsModel, args.optics)
    config = _recon_config(args)
    mask = fileio.read_mask(config.mask_path) if config.mask_path else None
    truth = fileio.read_field(args.truth).resample([e.time for e in epochs]) if args.truth else None

    states, state = reconstruct_4d(data, epochs, config, optics, grid, args.gain, mask, truth)
    fileio.write_field(args.out, states)
    outcome.outputs["estimate"] = Path(args.out)
    if args.log:
        fileio.write_frame(args.log, state.log_frame())
        outcome.outputs["log"] = Path(args.log)

    outcome.config("optics", optics)
    outcome.config("recon", config)
    outcome.config("grid", grid)
    outcome.summary["final_cost"] = state.cost_history[-1]
    outcome.summary["iterations"] = len(state.cost_history) - 1


def cmd_evaluate(args, outcome: Outcome) -> None:
    est = fileio.read_field(args.est)
    truth = fileio.read_field(args.truth).resample(est.times)
    frame = metrics_frame(truth, est)
    fileio.write_frame(args.out, frame)
    summary = frame.iloc[-1]
    outcome.outputs["metrics"] = Path(args.out)
    outcome.summary["delta"] = float(summary["delta_t"])
    outcome.summary["epsilon"] = float(summary["epsilon_t"])
    print(f"delta={summary['delta_t']:.6g} epsilon={summary['epsilon_t']:.6g}")


def cmd_sweep_sigma(args, outcome: Outcome) -> None:
    truth = fileio.read_field(args.truth)
    setup = _setup(args.setup, args.desk_scale)
    optics = _load(OpticsModel, args.optics)
    config = _load(ReconConfig, args.config)
    sensor = _load(SensorModel, args.noise) if args.noise else None
    if sensor is not None and args.seed is not None:
        sensor = sensor.model_copy(update={"seed": args.seed})
    mask = fileio.read_mask(args.mask) if args.mask else None
    sigmas = [parse_sigma(v) for v in args.sigmas.split(",") if v.strip()]

    epochs = build_epochs(setup, truth.grid)
    data = acquire(truth, epochs, optics, sensor, args.gain)
    points = [
        SweepPoint(
            kind="sigma",
            value=sigma,
            truth=truth,
            optics=optics,
            recon=config,
            gain=args.gain,
            epochs=tuple(epochs),
            data=tuple(data),
            mask=mask,
        )
        for sigma in sigmas
    ]
    frame = run_sweep(points, remote=args.remote)
    fileio.write_frame(args.out, frame)

    outcome.config("setup", setup)
    outcome.config("optics", optics)
    outcome.config("recon", config)
    outcome.config("sensor", sensor)
    if sensor is not None:
        outcome.seeds["sensor"] = sensor.seed
    outcome.outputs["sweep"] = Path(args.out)
    best = frame.loc[frame["epsilon"].idxmin()]
    outcome.summary["best_sigma"] = best["sigma"]
    outcome.summary["best_epsilon"] = float(best["epsilon"])


def cmd_sweep_extent(args, outcome: Outcome) -> None:
    truth = fileio.read_field(args.truth)
    optics = _load(OpticsModel, args.optics)
    config = _load(ReconConfig, args.config)
    sensor = _load(SensorModel, args.noise) if args.noise else None
    if sensor is not None and args.seed is not None:
        sensor = sensor.model_copy(update={"seed": args.seed})
    points = [
        SweepPoint(
            kind="extent",
            value=extent,
            truth=truth,
            optics=optics,
            recon=config,
            gain=args.gain,
            n_views=args.views,
            altitude=args.altitude,
            gsd=args.gsd,
            image_size=args.image_size,
            sensor=sensor,
        )
        for extent in _extents(args.extents)
    ]
    frame = run_sweep(points, remote=args.remote)
    fileio.write_frame(args.out, frame)
    outcome.config("optics", optics)
    outcome.config("recon", config)
    outcome.config("sensor", sensor)
    outcome.outputs["sweep"] = Path(args.out)


def cmd_analyze_spectrum(args, outcome: Outcome) -> None:
    truth = fileio.read_field(args.truth)
    report = bandlimit_check(truth, args.fraction, args.acquisition_period, args.window)
    fileio.write_frame(args.out, report.to_frame())
    outcome.outputs["spectrum"] = Path(args.out)
    outcome.summary["cutoff_hz"] = report.cutoff
    outcome.summary["nyquist_period"] = report.nyquist_period
    outcome.summary["adequate"] = report.adequate
    print(f"cutoff={report.cutoff:.6g} Hz nyquist_period={report.nyquist_period:.6g} s adequate={report.adequate}")


def _write_json(path: str, payload: dict, outcome: Outcome, name: str) -> None:
    fileio.atomic_write(path, json.dumps(payload, indent=2, sort_keys=True).encode())
    outcome.outputs[name] = Path(path)


def cmd_height(args, outcome: Outcome) -> None:
    obs = ShadowObservation(
        cloud_xy=tuple(_floats(args.cloud)),
        shadow_xy=tuple(_floats(args.shadow)),
        sun_zenith=math.radians(args.sun_zenith),
    )
    height = cloud_height(obs)
    outcome.summary["cloud_height"] = height
    print(f"cloud_height={height:.6g} m")
    _write_json(args.out, {"cloud_height": height, "observation": obs.model_dump(mode="json")}, outcome, "height")


def cmd_drift(args, outcome: Outcome) -> None:
    data, epochs = _observations(args)
    centroids = [center_of_mass(images.images[args.camera], args.threshold) for images in data]
    drift = estimate_drift(centroids, epochs, args.altitude, camera_index=args.camera)
    _write_json(args.out, drift.model_dump(mode="json"), outcome, "drift")
    if args.registered:
        fileio.write_epochs(args.registered, register_epochs(epochs, drift))
        outcome.outputs["registered_epochs"] = Path(args.registered)
    outcome.summary["speed_kmh"] = drift.speed_kmh
    outcome.summary["heading"] = drift.heading
    print(f"speed={drift.speed_kmh:.3f} km/h heading={drift.heading:.1f} deg")


def cmd_albedo(args, outcome: Outcome) -> None:
    data, epochs = _observations(args)
    grid = _load(VoxelGrid, args.grid)
    optics = _load(OpticsModel, args.optics)
    images, epoch = data[args.epoch], epochs[args.epoch]
    clear = None
    if args.max_intensity is not None:
        clear = [image <= args.max_intensity for image in images.images]
    albedo = estimate_albedo(images, epoch, optics, grid, args.gain, clear)
    outcome.config("optics", optics)
    outcome.summary["albedo"] = albedo
    print(f"albedo={albedo:.6f}")
    _write_json(args.out, {"albedo": albedo, "epoch": args.epoch}, outcome, "albedo")


def cmd_carve(args, outcome: Outcome) -> None:
    data, epochs = _observations(args)
    grid = _load(VoxelGrid, args.grid)
    clear = None
    if args.optics:
        optics = _load(OpticsModel, args.optics)
        clear = [render_clear_sky(optics, epoch, grid, args.gain) for epoch in epochs]
        outcome.config("optics", optics)
    mask = space_carve(
        data,
        epochs,
        grid,
        pixel_threshold=args.pixel_threshold,
        vote_threshold=args.vote_threshold,
        dilate=args.dilate,
        clear_sky=clear,
        coarse=args.coarse,
    )
    fileio.write_mask(args.out, mask)
    outcome.outputs["mask"] = Path(args.out)
    outcome.summary["carved_voxels"] = mask.count


def cmd_crossval(args, outcome: Outcome) -> None:
    data, epochs = _observations(args)
    grid = _load(VoxelGrid, args.grid)
    optics = _load(OpticsModel, args.optics)
    config = _recon_config(args)
    mask = fileio.read_mask(config.mask_path) if config.mask_path else None
    frame = cross_validate(data, epochs, (args.epoch, args.camera), config, optics, grid, args.gain, mask)
    fileio.write_frame(args.out, frame)
    outcome.config("optics", optics)
    outcome.config("recon", config)
    outcome.outputs["crossval"] = Path(args.out)
    print(frame.to_string(index=False))


def cmd_replay(args, outcome: Outcome) -> None:
    manifest = fileio.read_manifest(args.manifest)
    logger.info("Replaying %s run %s", manifest.command, manifest.run_id)
    code = main(manifest.argv)
    if code != 0:
        raise T4DError(f"replayed command exited with {code}")
    mismatched = [
        name
        for name, path in manifest.outputs.items()
        if not Path(path).is_file() or fileio.file_sha256(path) != manifest.output_hashes.get(name)
    ]
    if mismatched:
        raise T4DError(f"replay output hashes differ: {', '.join(sorted(mismatched))}")
    print(f"replay ok: {len(manifest.outputs)} outputs identical")


def _add_gain(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gain", type=float, default=None, help="camera gain (default: optics.gain)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="t4d", description="4D scattering tomography of dynamic clouds")
    parser.add_argument("--manifest", default=None, help="run manifest path (default: <out>.manifest.json)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom field sequence")
    p.add_argument("--spec", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("render", help="render (and optionally read out) images of a field sequence")
    p.add_argument("--truth", required=True)
    p.add_argument("--setup", default="A", help="A, B, C, baseline or a SetupConfig JSON file")
    p.add_argument("--desk-scale", type=float, default=None)
    p.add_argument("--optics", default=None)
    p.add_argument("--noise", default=None, help="SensorModel JSON; omit for noiseless images")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_gain(p)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("reconstruct", help="recover a field sequence from images")
    p.add_argument("--images", required=True)
    p.add_argument("--epochs", default=None, help="override the view geometry (e.g. registered epochs)")
    p.add_argument("--setup", default=None, help="rebuild the view geometry from a preset or SetupConfig JSON")
    p.add_argument("--desk-scale", type=float, default=None)
    p.add_argument("--grid", required=True)
    p.add_argument("--optics", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--sigma", default=None, help="seconds or inf")
    p.add_argument("--mask", default=None)
    p.add_argument("--truth", default=None, help="log per-iteration metrics against this truth")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="per-iteration CSV")
    _add_gain(p)
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="per-state and mean mass bias and relative error")
    p.add_argument("--truth", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("sweep-sigma", help="recovery error against kernel width")
    p.add_argument("--truth", required=True)
    p.add_argument("--setup", default="A")
    p.add_argument("--desk-scale", type=float, default=None)
    p.add_argument("--optics", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--sigmas", default="5,10,20,40,80,inf")
    p.add_argument("--remote", action="store_true", help="run the sweep points on Modal")
    p.add_argument("--out", required=True)
    _add_gain(p)
    p.set_defaults(handler=cmd_sweep_sigma)

    p = sub.add_parser("sweep-extent", help="static recovery error against viewing extent")
    p.add_argument("--truth", required=True)
    p.add_argument("--optics", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--extents", default="10..120", help="degrees: a,b,c or a..b[..step]")
    p.add_argument("--views", type=int, default=9)
    p.add_argument("--altitude", type=float, default=5000.0)
    p.add_argument("--gsd", type=float, default=10.0)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--remote", action="store_true")
    p.add_argument("--out", required=True)
    _add_gain(p)
    p.set_defaults(handler=cmd_sweep_extent)

    p = sub.add_parser("analyze-spectrum", help="temporal power spectrum and cutoff of a field sequence")
    p.add_argument("--truth", required=True)
    p.add_argument("--fraction", type=float, default=0.95)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--acquisition-period", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_analyze_spectrum)

    pre = sub.add_parser("preprocess", help="cloud height, drift and surface albedo")
    tools = pre.add_subparsers(dest="tool", required=True)

    p = tools.add_parser("height")
    p.add_argument("--cloud", required=True, help="x,y meters")
    p.add_argument("--shadow", required=True, help="x,y meters")
    p.add_argument("--sun-zenith", type=float, required=True, help="degrees")
    p.add_argument("--out", default="cloud_height.json")
    p.set_defaults(handler=cmd_height)

    p = tools.add_parser("drift")
    p.add_argument("--images", required=True)
    p.add_argument("--epochs", default=None)
    p.add_argument("--altitude", type=float, required=True, help="cloud altitude, meters")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--registered", default=None, help="write drift-registered epochs JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_drift)

    p = tools.add_parser("albedo")
    p.add_argument("--images", required=True)
    p.add_argument("--epochs", default=None)
    p.add_argument("--grid", required=True)
    p.add_argument("--optics", default=None)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--max-intensity", type=float, default=None, help="pixels at or below count as clear")
    p.add_argument("--out", default="albedo.json")
    _add_gain(p)
    p.set_defaults(handler=cmd_albedo)

    p = sub.add_parser("carve", help="space-carving mask from images")
    p.add_argument("--images", required=True)
    p.add_argument("--epochs", default=None)
    p.add_argument("--grid", required=True)
    p.add_argument("--optics", default=None, help="clear-sky model; omit to threshold raw intensities")
    p.add_argument("--pixel-threshold", type=float, default=None)
    p.add_argument("--vote-threshold", type=int, default=None)
    p.add_argument("--dilate", type=int, default=1)
    p.add_argument("--coarse", type=int, default=2)
    p.add_argument("--out", required=True)
    _add_gain(p)
    p.set_defaults(handler=cmd_carve)

    p = sub.add_parser("crossval", help="fit error of a held-out view, 4D vs static")
    p.add_argument("--images", required=True)
    p.add_argument("--epochs", default=None)
    p.add_argument("--grid", required=True)
    p.add_argument("--optics", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--sigma", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_gain(p)
    p.set_defaults(handler=cmd_crossval)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest_file", metavar="manifest")
    p.set_defaults(handler=cmd_replay)
    return parser


def _configure_logging() -> None:
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(
            level=os.getenv("T4D_LOG_LEVEL", "INFO").upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )


def _run(args, argv: list[str]) -> None:
    outcome = Outcome()
    started = time.monotonic()
    args.handler(args, outcome)
    if args.command == "replay" or not outcome.outputs:
        return

    manifest = fileio.new_manifest(args.command if args.command != "preprocess" else f"preprocess {args.tool}", argv)
    manifest.configs = outcome.configs
    manifest.seeds = outcome.seeds
    manifest.summary = outcome.summary
    manifest.duration_seconds = time.monotonic() - started
    fileio.record_outputs(manifest, outcome.outputs)
    first = next(iter(outcome.outputs.values()))
    fileio.write_manifest(_manifest_path(args, str(first)), manifest)


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        args.manifest = args.manifest_file
    try:
        _run(args, argv)
    except (FileFormatError, ValidationError, json.JSONDecodeError, FileNotFoundError) as e:
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as e:
        print(f"numeric error: {_one_line(e)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (T4DError, ValueError) as e:
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return EXIT_ERROR
    return 0


def _one_line(error: Exception) -> str:
    return " ".join(str(error).split())
