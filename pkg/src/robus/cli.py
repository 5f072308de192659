"""Command-line front end over the pipeline stages.

Thin argparse shell: every subcommand parses flags, loads the
configuration, calls into :mod:`robus.pipeline`, and maps failures to
distinct exit codes per stage class. All real work lives in the library.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import pipeline, robotsim, volume
from .calib import load_calibration, save_calibration
from .errors import ConfigError, FileFormatError, RobusError
from .geom import RigidTransform
from .pipeline import (
    PipelineConfig, StageError, cmd_pipeline, cmd_report, cmd_touch_accuracy,
    default_config, load_config,
)
from .register import RegistrationResult, read_report, register_rigid, \
    update_patient_calibration
from .trajectory import load_scan_poses, save_plan, save_scan_poses
from .volume import load_cloud, load_svol, save_svol

EXIT_CODES = {
    "config": 2,
    "phantom": 3,
    "camera": 4,
    "calibration": 5,
    "planning": 6,
    "sweep": 7,
    "acquisition": 8,
    "compounding": 9,
    "registration": 10,
    "update": 11,
    "report": 12,
    "io": 13,
    "other": 20,
}


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, StageError):
        return EXIT_CODES.get(exc.stage, EXIT_CODES["other"])
    if isinstance(exc, ConfigError):
        return EXIT_CODES["config"]
    if isinstance(exc, FileFormatError):
        return EXIT_CODES["io"]
    return EXIT_CODES["other"]


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed, seeds={})
    if args.out:
        from dataclasses import replace
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _common_flags(p):
    p.add_argument("--config", metavar="PATH", help="pipeline config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", metavar="DIR", default=None, help="output directory")
    p.add_argument("--verbose", action="store_true")


def _out_dir(cfg, args):
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def run_phantom(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    mri, tissue = volume.make_phantom(cfg.phantom, cfg.seeds["phantom"])
    save_svol(mri, os.path.join(out, "mri.svol"))
    save_svol(tissue, os.path.join(out, "tissue.svol"))
    print(f"wrote mri.svol and tissue.svol to {out}")
    return 0


def run_calibrate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    scene = pipeline.build_scene(cfg)
    system = pipeline.calibrate_system(scene)
    path = os.path.join(out, "calibration_v0.txt")
    save_calibration(system.state0, path)
    print(f"hand-eye residual {system.hand_eye_residual_mm:.4f} mm, "
          f"surface match RMS {system.icp_rms_mm:.3f} mm")
    print(f"wrote {path}")
    return 0


def run_plan(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    state = load_calibration(args.calibration)
    surface = load_cloud(args.surface)
    if not isinstance(surface, volume.SurfaceCloud):
        raise ConfigError("surface file must carry normals")
    poses = pipeline.plan_in_world(cfg.plan, state, surface)
    save_plan(cfg.plan, os.path.join(out, "plan.txt"))
    save_scan_poses(poses, os.path.join(out, "poses.txt"))
    print(f"planned {len(poses)} scan poses -> {out}/poses.txt")
    return 0


def run_sweep_cmd(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    poses = load_scan_poses(args.poses)
    scene = pipeline.build_scene(cfg)
    result = robotsim.run_sweep(poses, cfg.stiffness, scene.contact,
                                rate=cfg.sweep_rate)
    path = os.path.join(out, "sweep.txt")
    robotsim.save_sweep(result, cfg.stiffness, path)
    print(f"sweep {result.status}, {len(result.frames)} frames -> {path}")
    return 0 if result.status == "completed" else EXIT_CODES["sweep"]


def run_register(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    us = load_svol(args.us)
    mri = load_svol(args.mri)
    mask = None
    if args.mask:
        mask_vol = load_svol(args.mask)
        mask = volume.BinaryMask(mask_vol.dims, mask_vol.spacing, mask_vol.origin,
                                 mask_vol.frame, mask_vol.data >= 0.5)
    state = load_calibration(args.calibration)
    initial = pipeline.world_from_mri_corrected(state)
    result = register_rigid(us, mri, initial, us_mask=mask,
                            params=cfg.registration)
    path = os.path.join(out, "registration.json")
    from .register import write_report
    write_report(path, initial, result)
    print(f"similarity {result.similarity_before:.4f} -> "
          f"{result.similarity_after:.4f} -> {path}")
    return 0


def run_update(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    state = load_calibration(args.calibration)
    report = read_report(args.registration)
    block = report["patient_correction"]
    rigid = RigidTransform.from_matrix4(np.array(block["matrix"]),
                                        block["from"], block["to"])
    result = RegistrationResult(
        rigid=rigid,
        mri_to_us_refined=pipeline.world_from_mri_corrected(state),
        similarity_before=report["similarity_before"],
        similarity_after=report["similarity_after"],
        evaluations=report["evaluations"],
        improved=report["improved"])
    new_state = update_patient_calibration(state, result)
    path = os.path.join(out, f"calibration_v{new_state.version}.txt")
    save_calibration(new_state, path)
    print(f"updated calibration to version {new_state.version} -> {path}")
    return 0


def run_pipeline_cmd(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    metrics = cmd_pipeline(cfg, out)
    it1, it2 = metrics.iterations
    print(f"scan #1 registration: {it1.detected_translation_mm:.2f} mm / "
          f"{it1.detected_rotation_deg:.2f} deg")
    print(f"scan #2 registration: {it2.detected_translation_mm:.2f} mm / "
          f"{it2.detected_rotation_deg:.2f} deg")
    print(f"metrics -> {os.path.join(out, 'metrics.txt')}")
    return 0


def run_touch(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args)
    stats = cmd_touch_accuracy(cfg, n_targets=args.targets, n_seeds=args.repeats)
    path = os.path.join(out, "touch_accuracy.txt")
    with open(path, "w") as fh:
        for key, value in stats.to_pairs():
            fh.write(f"{key} {value}\n")
    print(f"xy accuracy {stats.xy_mean:.2f} +/- {stats.xy_std:.2f} mm")
    print(f"z accuracy  {stats.z_mean:.2f} +/- {stats.z_std:.2f} mm")
    print(f"-> {path}")
    return 0


def run_report(args) -> int:
    text, summary = cmd_report(args.metrics)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        with open(os.path.join(args.out, "report.txt"), "w") as fh:
            fh.write(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robus",
        description="Simulated MRI-guided autonomous robotic ultrasound pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate the synthetic phantom volumes")
    _common_flags(p)
    p.set_defaults(func=run_phantom, stage="phantom")

    p = sub.add_parser("calibrate", help="hand-eye + surface-match calibration")
    _common_flags(p)
    p.set_defaults(func=run_calibrate, stage="calibration")

    p = sub.add_parser("plan", help="project the planned line onto the surface")
    _common_flags(p)
    p.add_argument("--calibration", required=True)
    p.add_argument("--surface", required=True, help="patient cloud (camera frame)")
    p.set_defaults(func=run_plan, stage="planning")

    p = sub.add_parser("sweep", help="run the compliant-contact sweep")
    _common_flags(p)
    p.add_argument("--poses", required=True)
    p.set_defaults(func=run_sweep_cmd, stage="sweep")

    p = sub.add_parser("register", help="LC2 rigid registration of US to MRI")
    _common_flags(p)
    p.add_argument("--us", required=True)
    p.add_argument("--mri", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--calibration", required=True)
    p.set_defaults(func=run_register, stage="registration")

    p = sub.add_parser("update", help="fold a registration into the calibration")
    _common_flags(p)
    p.add_argument("--calibration", required=True)
    p.add_argument("--registration", required=True)
    p.set_defaults(func=run_update, stage="update")

    p = sub.add_parser("pipeline", help="full closed-loop workflow with artifacts")
    _common_flags(p)
    p.set_defaults(func=run_pipeline_cmd, stage="pipeline")

    p = sub.add_parser("touch-accuracy", help="point-touch accuracy study")
    _common_flags(p)
    p.add_argument("--targets", type=int, default=20)
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=run_touch, stage="calibration")

    p = sub.add_parser("report", help="aggregate metrics files into a table")
    p.add_argument("metrics", nargs="+", help="metrics files from pipeline runs")
    p.add_argument("--out", default=None)
    p.set_defaults(func=run_report, stage="report")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RobusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    raise SystemExit(main())
