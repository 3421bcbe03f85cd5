# rfit/cli.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

# pylint: disable=too-many-locals

"""Command line front end: simulate, gradcheck, sweep, fit and replay"""

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import RfitError
from .gradients import DEFAULT_STEPS, BoundaryConfig, fd_oracle, total_gradient
from .optimize import (BEAMFORM, COMPLEX, CONVERGED, EXACT, MAGNITUDE, SURROGATE, LossConfig,
                       OptimizerConfig, SceneObjective, count_local_minima, fit, sweep)
from .radar import (AngleGrid, ArrayGeometry, SurrogateConfig, Taps, airy_spatial_surrogate,
                    arrival_angles, beamform_spectrum, exact_profile, music_spectrum,
                    range_profile_surrogate, snapshots_from_scene, spectrum_peaks)
from .scenefile import (load_observation, load_scene, save_scene, write_cir_csv, write_gradient_report,
                        write_grid, write_profile_csv, write_spectrum_csv, write_sweep_csv,
                        write_trace_csv)
from .tracer import trace_paths
from .utils import atomic_write, file_digest, thread_count

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2

MANIFEST = "manifest.json"


def _grid(args):
    return AngleGrid.regular(args.grid_azimuth, args.grid_elevation)


def _loss_config(scene_file, kind):
    if scene_file.loss is not None:
        return scene_file.loss
    return LossConfig(domain=COMPLEX if kind == EXACT else MAGNITUDE)


def _surrogate(scene_file, args):
    surrogate = scene_file.surrogate or SurrogateConfig.for_radar(scene_file.radar, seed=args.seed)
    if getattr(args, "surrogate_sigma", None) is not None:
        surrogate = replace(surrogate, sigma=args.surrogate_sigma)
    return surrogate


def _boundary(scene_file, args):
    return scene_file.boundary or BoundaryConfig(seed=args.seed)


def _objective(scene_file, args, kind, observation=None, scene=None):
    return SceneObjective(scene if scene is not None else scene_file.scene, observation, scene_file.radar,
                          _loss_config(scene_file, kind), _surrogate(scene_file, args), kind,
                          grid=_grid(args) if kind == BEAMFORM else None, max_order=args.order,
                          threads=thread_count(args.threads))


def _write_manifest(args, argv, outputs, started):
    out_dir = Path(args.out_dir)
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "scene": str(getattr(args, "scene", "")),
        "scene_sha256": file_digest(args.scene) if getattr(args, "scene", None) else None,
        "seed": args.seed,
        "threads": thread_count(args.threads),
        "version": __version__,
        "wall_clock_s": round(time.monotonic() - started, 3),
        "outputs": {str(p.name): file_digest(p) for p in outputs},
    }
    atomic_write(out_dir / MANIFEST, json.dumps(manifest, indent=2) + "\n")


def cmd_simulate(args):
    """Trace the scene and write its CIR, range profiles and optionally a spectrum"""
    scene_file = load_scene(args.scene)
    scene = scene_file.scene
    radar = scene_file.radar
    out_dir = Path(args.out_dir)
    sample = trace_paths(scene, max_order=args.order, threads=thread_count(args.threads))
    outputs = [write_cir_csv(out_dir / "cir.csv", sample)]

    profiles = []
    for rx in range(scene.n_rx):
        taps = Taps.from_paths(sample.for_rx(rx))
        if args.profile == SURROGATE:
            profiles.append(range_profile_surrogate(taps, radar, _surrogate(scene_file, args)).values)
        else:
            profiles.append(exact_profile(taps, radar).values)
    outputs.append(write_profile_csv(out_dir / "profile.csv", np.array(profiles), radar.bin_delays))

    if args.spectrum != "none":
        array = ArrayGeometry.from_scene(scene)
        grid = _grid(args)
        rng = np.random.default_rng(args.seed)
        if args.spectrum == "airy":
            centre = int(np.argmin(np.linalg.norm(scene.rx_array - scene.rx_array.mean(axis=0), axis=1)))
            surrogate = _surrogate(scene_file, args)
            if surrogate.aperture_radius is None:
                surrogate = replace(surrogate, aperture_radius=array.half_aperture)
            spectrum = airy_spatial_surrogate(arrival_angles(sample.for_rx(centre), scene.rx_array[centre]),
                                              surrogate, grid, scene.wavelength, rng)
        else:
            snapshots = snapshots_from_scene(scene, array, sample, n_snapshots=args.snapshots,
                                             snr_db=args.snr, decorrelate=args.snapshots > 1, rng=rng)
            if args.spectrum == "music":
                spectrum = music_spectrum(snapshots, array, args.sources, grid)
            else:
                spectrum = beamform_spectrum(snapshots, array, grid)
        for azimuth, elevation, power in spectrum_peaks(spectrum, max(args.sources, 1)):
            logger.info("Spectrum peak at azimuth %.2f deg, elevation %.2f deg (%.3g)",
                        np.degrees(azimuth), np.degrees(elevation), power)
        outputs.append(write_spectrum_csv(out_dir / "spectrum.csv", spectrum))
        outputs.append(write_grid(out_dir / "spectrum.grid", spectrum.power))
    return EXIT_OK, outputs


def _parse_assignments(items, params):
    offsets = np.zeros(params.size)
    for item in items or ():
        name, _, value = item.partition("=")
        try:
            offsets[params.index(name)] += float(value)
        except ValueError:
            raise RfitError(f"Malformed assignment {item!r}; expected NAME=VALUE") from None
    return offsets


def cmd_gradcheck(args):
    """Compare the analytic gradient with finite differences"""
    scene_file = load_scene(args.scene)
    scene = scene_file.scene
    params = scene.params
    objective = _objective(scene_file, args, args.loss)
    theta = params.pack()
    if args.observation:
        observation = load_observation(args.observation)
    else:
        truth = theta + _parse_assignments(args.truth_offset or ["translation.z=0.01"], params)
        observation = objective.observe(objective.scene_at(truth))
    objective = objective.with_observation(observation)

    settings = _boundary(scene_file, args)
    boundary = None if args.interior_only else settings
    # Secants span twice the estimator reach; the stencil samples every beam width
    window = 2.0 * settings.reach
    stencil_points = 2 * int(math.ceil(window / settings.beam_width)) + 1
    names = params.names()
    indices = [params.index(n) for n in args.params] if args.params else None

    result = total_gradient(scene, objective, boundary, threads=objective.threads, max_order=args.order)
    report = fd_oracle(objective.loss_at, theta, result.gradient, args.steps or DEFAULT_STEPS, names=names,
                       indices=indices, forward=args.forward, signature_fn=objective.signature_at,
                       gradient_fn=lambda t: objective.gradient_at(t, boundary),
                       secant_halfwidth=window, boundary_mask=result.boundary_mask,
                       secant_points=stencil_points, singular_mask=result.singular_mask)
    outputs = [write_gradient_report(Path(args.out_dir) / "gradcheck.csv", report)]
    unverifiable = [n for n, ok in zip(report.names, report.verifiable) if not ok]
    if unverifiable:
        logger.warning("Unverifiable parameters: %s", ", ".join(unverifiable))
    passed = report.passed(args.rtol, strict=args.strict)
    for name, ok, rel in zip(report.names, passed, report.rel_err):
        if not ok:
            logger.error("Gradient check failed for %s (relative error %.3g)", name, rel)
    return (EXIT_OK if np.all(passed) else EXIT_FAILED), outputs


def cmd_sweep(args):
    """Tabulate the exact and surrogate losses along one parameter"""
    scene_file = load_scene(args.scene)
    scene = scene_file.scene
    index = scene.params.index(args.param)
    low, high = args.range
    if args.relative:
        centre = scene.params.pack()[index]
        low, high = centre + low, centre + high
    objectives = {}
    for kind in (EXACT, SURROGATE):
        objective = _objective(scene_file, args, kind)
        objectives[kind] = objective.with_observation(objective.observe())
    values, losses = sweep(objectives, args.param, low, high, args.steps)
    for label, curve in losses.items():
        logger.info("%s loss: %d local minima", label, count_local_minima(curve))
    return EXIT_OK, [write_sweep_csv(Path(args.out_dir) / "sweep.csv", args.param, values, losses)]


def cmd_fit(args):
    """Fit the scene parameters to an observation"""
    scene_file = load_scene(args.scene)
    observation = load_observation(args.observation)
    objective = _objective(scene_file, args, args.loss, observation=observation)
    base = scene_file.optimizer or OptimizerConfig(learning_rate=args.lr or 1e-3)
    overrides = {"seed": args.seed}
    for key in ("lr", "reg", "max_iter", "tol", "minibatch"):
        value = getattr(args, key)
        if value is not None:
            overrides[{"lr": "learning_rate", "reg": "regularization"}.get(key, key)] = value
    if args.free:
        overrides["free"] = tuple(args.free)
    config = replace(base, **overrides)
    boundary = _boundary(scene_file, args) if args.boundary else None
    out_dir = Path(args.out_dir)
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    result = fit(objective, config, boundary, checkpoint=checkpoint, resume=args.resume)
    outputs = [write_trace_csv(out_dir / "trace.csv", result.trace),
               save_scene(scene_file, result.scene.params, out_dir / "fitted_scene.json")]
    logger.info("Fit %s after %d iterations", result.trace.status, len(result.trace))
    return (EXIT_OK if result.trace.status == CONVERGED else EXIT_FAILED), outputs


def cmd_replay(args):
    """Run the command recorded in a manifest again"""
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        argv = manifest["argv"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise RfitError(f"{args.manifest}: not a run manifest ({exc})") from exc
    if manifest.get("version") != __version__:
        logger.warning("Manifest was written by version %s", manifest.get("version"))
    return main(argv), []


def _add_scene_options(parser):
    parser.add_argument("scene", type=Path, help="JSON scene description")
    parser.add_argument("--order", type=int, default=2, choices=(0, 1, 2), help="Highest reflection order")
    parser.add_argument("--surrogate-sigma", type=float, default=None,
                        help="Width of the Gaussian range surrogate (s)")
    parser.add_argument("--grid-azimuth", type=int, default=181, help="Azimuth grid points")
    parser.add_argument("--grid-elevation", type=int, default=46, help="Elevation grid points")


def build_parser():
    """The argument parser for the ``rfit`` command"""
    parser = argparse.ArgumentParser(prog="rfit", description="Differentiable radar ray tracing and scene fitting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="Seed for every random choice")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default $RFIT_THREADS or 1)")
    parser.add_argument("--out-dir", default=".", help="Directory for output files")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging (repeatable)")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="Forward simulation")
    _add_scene_options(simulate)
    simulate.add_argument("--profile", choices=(EXACT, SURROGATE), default=EXACT, help="Range profile model")
    simulate.add_argument("--spectrum", choices=("none", "beamform", "music", "airy"), default="none")
    simulate.add_argument("--sources", type=int, default=1, help="MUSIC signal subspace dimension")
    simulate.add_argument("--snapshots", type=int, default=1, help="Array snapshots")
    simulate.add_argument("--snr", type=float, default=None, help="Snapshot SNR (dB)")
    simulate.set_defaults(handler=cmd_simulate)

    gradcheck = commands.add_parser("gradcheck", help="Finite-difference gradient check")
    _add_scene_options(gradcheck)
    gradcheck.add_argument("--loss", choices=(SURROGATE, EXACT, BEAMFORM), default=SURROGATE)
    gradcheck.add_argument("--observation", default=None, help="Observation file (synthesised if omitted)")
    gradcheck.add_argument("--truth-offset", action="append", metavar="NAME=VALUE",
                           help="Offset of the synthesised truth from the scene parameters")
    gradcheck.add_argument("--params", nargs="+", default=None, help="Parameter names to check")
    gradcheck.add_argument("--interior-only", action="store_true", help="Leave out the boundary term")
    gradcheck.add_argument("--rtol", type=float, default=1e-3, help="Relative tolerance")
    gradcheck.add_argument("--steps", type=float, nargs="+", default=None, help="Finite-difference steps")
    gradcheck.add_argument("--forward", action="store_true", help="Forward instead of central differences")
    gradcheck.add_argument("--strict", action="store_true", help="Fail on unverifiable parameters")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    sweep_parser = commands.add_parser("sweep", help="Loss landscape along one parameter")
    _add_scene_options(sweep_parser)
    sweep_parser.add_argument("--param", required=True, help="Parameter name")
    sweep_parser.add_argument("--range", type=float, nargs=2, required=True, metavar=("LOW", "HIGH"))
    sweep_parser.add_argument("--steps", type=int, default=101, help="Grid points")
    sweep_parser.add_argument("--relative", action="store_true", help="Range is relative to the current value")
    sweep_parser.set_defaults(handler=cmd_sweep)

    fit_parser = commands.add_parser("fit", help="Fit scene parameters to an observation")
    _add_scene_options(fit_parser)
    fit_parser.add_argument("observation", help="Profile CSV, spectrum CSV or binary grid")
    fit_parser.add_argument("--loss", choices=(SURROGATE, EXACT, BEAMFORM), default=SURROGATE)
    fit_parser.add_argument("--lr", type=float, default=None, help="Learning rate")
    fit_parser.add_argument("--reg", type=float, default=None, help="Laplacian regularisation weight")
    fit_parser.add_argument("--max-iter", type=int, default=None, help="Iteration limit")
    fit_parser.add_argument("--tol", type=float, default=None, help="Loss tolerance")
    fit_parser.add_argument("--minibatch", type=float, default=None, help="Fraction of receivers and bins per step")
    fit_parser.add_argument("--free", nargs="+", default=None, help="Parameters allowed to change")
    fit_parser.add_argument("--boundary", action="store_true", help="Include the boundary term")
    fit_parser.add_argument("--checkpoint", default=None, help="Checkpoint file")
    fit_parser.add_argument("--resume", action="store_true", help="Resume from the checkpoint")
    fit_parser.set_defaults(handler=cmd_fit)

    replay = commands.add_parser("replay", help="Re-run a recorded manifest")
    replay.add_argument("manifest", help="manifest.json of an earlier run")
    replay.set_defaults(handler=cmd_replay)
    return parser


def main(argv=None):
    """Entry point; returns the process exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    started = time.monotonic()
    try:
        status, outputs = args.handler(args)
    except RfitError as exc:
        logger.error("%s", exc)
        print(f"rfit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.command != "replay":
        _write_manifest(args, argv, outputs, started)
    return status


if __name__ == "__main__":
    sys.exit(main())
