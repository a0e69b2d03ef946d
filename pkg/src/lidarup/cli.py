"""Batch command line: run the pipeline, evaluate cloud pairs, build test data.

Subcommands:
    run    process a sequence manifest into virtual clouds and reports
    eval   compare two directories of cloud binaries pairwise by filename
    synth  generate a synthetic sequence from a scenario file

Exit codes: 0 success, 1 runtime failure, 2 bad usage or unreadable inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .association import PlaneFitError, fit_ground_msac
from .config import ConfigError, PipelineConfig, _parse_scalar
from .dataset_io import ManifestError, read_cloud_bin, read_manifest
from .metrics import EvalProtocol, apply_protocol, evaluate_pair
from .pipeline import PipelineRunner
from .synthesis import restrict_to_camera_fov
from .synthworld import generate, parse_scenario

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarup", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="upsample a sequence into virtual clouds")
    p_run.add_argument("--manifest", required=True, help="sequence manifest path")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--config", help="key = value config file")
    p_run.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p_run.add_argument("--ply", action="store_true", help="also write provenance-colored PLY")
    p_run.add_argument(
        "--emit-at-anchor", action="store_true",
        help="also emit pass-through clouds at frames that already have a scan",
    )
    p_run.add_argument("-v", "--verbose", action="store_true", help="stage timings to stderr")

    p_eval = sub.add_parser("eval", help="compare cloud directories pairwise")
    p_eval.add_argument("--estimated", required=True, help="directory of estimated .bin clouds")
    p_eval.add_argument("--reference", required=True, help="directory of reference .bin clouds")
    p_eval.add_argument("--target-points", type=int, help="downsample both clouds to this size")
    p_eval.add_argument("--crop", help='six numbers "x0 x1 y0 y1 z0 z1", inf allowed')
    p_eval.add_argument("--remove-ground", action="store_true", help="drop fitted ground plane inliers")
    p_eval.add_argument("--protocol-seed", type=int, default=0, help="seed for the protocol downsample")
    p_eval.add_argument("--no-emd", action="store_true", help="skip the assignment metric")
    p_eval.add_argument("--manifest", help="manifest supplying calibration for --restrict-fov")
    p_eval.add_argument(
        "--restrict-fov", action="store_true",
        help="keep only points inside the camera frustum (needs --manifest)",
    )
    p_eval.add_argument(
        "--fov-order", choices=("before", "after"), default="before",
        help="apply the frustum restriction before or after the protocol steps",
    )
    p_eval.add_argument("--out", help="write a JSON report here")
    p_eval.add_argument("-v", "--verbose", action="store_true")

    p_synth = sub.add_parser("synth", help="generate a synthetic sequence")
    p_synth.add_argument("--scenario", required=True, help="scenario key = value file")
    p_synth.add_argument("--out", required=True, help="output sequence directory")
    p_synth.add_argument("-v", "--verbose", action="store_true")
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    mapping: dict = {}
    if args.config:
        mapping.update(PipelineConfig.mapping_from_file(args.config))
    for entry in args.set:
        if "=" not in entry:
            raise ConfigError(f"--set needs KEY=VALUE, got {entry!r}")
        key, _, raw = entry.partition("=")
        key = key.strip()
        mapping[key] = raw.strip() if key == "protocol.crop" else _parse_scalar(raw)
    return PipelineConfig.from_mapping(mapping)


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        config = _load_config(args)
        manifest = read_manifest(args.manifest)
    except (ConfigError, ManifestError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    runner = PipelineRunner(
        manifest,
        config,
        out_dir=args.out,
        write_ply=args.ply,
        emit_at_anchor=args.emit_at_anchor,
    )
    result = runner.run()
    print(
        f"{len(result.virtual_frames)} virtual clouds from "
        f"{len(result.anchor_frames)} anchors -> {result.out_dir}"
    )
    if result.errors:
        print(f"{len(result.errors)} frame(s) failed; see stderr/run_report.json", file=sys.stderr)
    if not result.virtual_frames and result.errors:
        return 1
    return 0


def _parse_crop(text: Optional[str]):
    if text is None:
        return None
    parts = [float(v) for v in text.split()]
    if len(parts) != 6:
        raise ValueError('crop needs six numbers "x0 x1 y0 y1 z0 z1"')
    return ((parts[0], parts[1]), (parts[2], parts[3]), (parts[4], parts[5]))


def _cmd_eval(args: argparse.Namespace) -> int:
    est_dir = Path(args.estimated)
    ref_dir = Path(args.reference)
    if not est_dir.is_dir() or not ref_dir.is_dir():
        print("error: --estimated and --reference must be directories", file=sys.stderr)
        return 2
    try:
        crop = _parse_crop(args.crop)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    calibration = None
    if args.restrict_fov:
        if not args.manifest:
            print("error: --restrict-fov needs --manifest for calibration", file=sys.stderr)
            return 2
        try:
            calibration = read_manifest(args.manifest).calibration
        except (ManifestError, OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2

    est_names = {p.name for p in est_dir.glob("*.bin")}
    ref_names = {p.name for p in ref_dir.glob("*.bin")}
    paired = sorted(est_names & ref_names)
    for name in sorted(est_names - ref_names):
        print(f"warning: {name} has no reference counterpart", file=sys.stderr)
    for name in sorted(ref_names - est_names):
        print(f"warning: {name} has no estimated counterpart", file=sys.stderr)
    if not paired:
        print("error: no filename pairs between the two directories", file=sys.stderr)
        return 2

    protocol = EvalProtocol(
        crop=crop,
        target_points=args.target_points,
        remove_ground=args.remove_ground,
        seed=args.protocol_seed,
    )

    def fov(cloud):
        return restrict_to_camera_fov(cloud, calibration.t_lidar_to_cam, calibration.cam)

    def ground_of(cloud):
        if not protocol.remove_ground:
            return None
        try:
            plane, _ = fit_ground_msac(cloud, seed=protocol.seed)
        except PlaneFitError:
            return None
        return plane

    pairs: dict[str, dict] = {}
    cds: list[float] = []
    emds: list[float] = []
    failed = 0
    for name in paired:
        try:
            a = read_cloud_bin(est_dir / name)
            b = read_cloud_bin(ref_dir / name)
            if calibration is not None and args.fov_order == "before":
                a, b = fov(a), fov(b)
            if calibration is not None and args.fov_order == "after":
                a = fov(apply_protocol(a, protocol, ground_of(a)))
                b = fov(apply_protocol(b, protocol, ground_of(b)))
                report = evaluate_pair(a, b, EvalProtocol(seed=protocol.seed), compute_emd=not args.no_emd)
            else:
                report = evaluate_pair(
                    a, b, protocol, ground_of(a), ground_of(b), compute_emd=not args.no_emd
                )
        except (OSError, ValueError) as exc:
            print(f"warning: {name}: {exc}", file=sys.stderr)
            failed += 1
            continue
        pairs[name] = report.to_dict()
        cds.append(report.cd)
        emd_text = ""
        if report.emd is not None:
            emds.append(report.emd)
            emd_text = f" emd_m2={report.emd:.6g}"
        print(f"{name}: cd_m2={report.cd:.6g}{emd_text} n={report.n_points_a}/{report.n_points_b}")

    if not pairs:
        print("error: every pair failed to evaluate", file=sys.stderr)
        return 1
    summary = f"mean over {len(cds)} pairs: cd_m2={float(np.mean(cds)):.6g}"
    if emds:
        summary += f" emd_m2={float(np.mean(emds)):.6g}"
    print(summary)

    if args.out:
        doc = {
            "protocol": protocol.describe(),
            "pairs": pairs,
            "unpaired_estimated": sorted(est_names - ref_names),
            "unpaired_reference": sorted(ref_names - est_names),
            "mean_cd_m2": float(np.mean(cds)),
            "mean_emd_m2": float(np.mean(emds)) if emds else None,
        }
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0 if failed == 0 else 1


def _cmd_synth(args: argparse.Namespace) -> int:
    try:
        scenario = parse_scenario(args.scenario)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = generate(scenario, args.out)
    print(
        f"{scenario.frames} frames, {len(result.cloud_frames)} scans, "
        f"{len(result.virtual_frames)} ground-truth virtual clouds -> {result.out_dir}"
    )
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    _configure_logging(getattr(args, "verbose", False))
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "eval":
        return _cmd_eval(args)
    return _cmd_synth(args)


if __name__ == "__main__":
    sys.exit(main())
