"""Command-line front end: simulate -> calibrate -> evaluate.

Exit codes: 0 success; 1 invalid config or schema violation; 2 I/O failure;
3 pipeline stage failure (stage named on stderr); 4 too few correspondences.
Log verbosity comes from the CAMREG_LOG environment variable (debug/info/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .evaluation import (
    TooFewCorrespondencesError,
    compare_to_ground_truth,
    pose_rmsd,
    reprojection_residuals,
    reprojection_rmse,
)
from .io import (
    SchemaError,
    read_dataset,
    read_ground_truth,
    read_result,
    scenario_config_from_dict,
    scenario_config_to_dict,
    write_dataset,
    write_ground_truth,
    write_manifest,
    write_reports,
    write_result,
)
from .registration import PipelineOptions, PipelineStageError, run_pipeline
from .simulator import InvalidConfigError, generate_scenario

log = logging.getLogger("camreg")

EXIT_OK = 0
EXIT_INVALID_INPUT = 1
EXIT_IO = 2
EXIT_PIPELINE = 3
EXIT_TOO_FEW = 4


def _configure_logging() -> None:
    level = os.environ.get("CAMREG_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(name)s %(levelname)s %(message)s")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        raw = Path(args.config).read_text()
    except OSError as e:
        return _fail(EXIT_IO, f"cannot read config: {e}")
    try:
        cfg = scenario_config_from_dict(json.loads(raw))
        errors = cfg.validation_errors()
        if errors:
            raise InvalidConfigError("; ".join(errors))
    except (json.JSONDecodeError, SchemaError, InvalidConfigError) as e:
        return _fail(EXIT_INVALID_INPUT, f"invalid config: {e}")

    out_dir = Path(args.out)
    t0 = time.perf_counter()
    gt, dataset = generate_scenario(cfg)
    t_gen = (time.perf_counter() - t0) * 1e3
    try:
        t0 = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)
        written = write_dataset(out_dir, dataset)
        written.append(write_ground_truth(out_dir, gt))
        t_write = (time.perf_counter() - t0) * 1e3
        write_manifest(
            out_dir,
            "simulate",
            scenario_config_to_dict(cfg),
            cfg.seed,
            [Path(args.config)],
            written,
            {"generate": t_gen, "write": t_write},
        )
    except OSError as e:
        return _fail(EXIT_IO, f"cannot write outputs: {e}")
    log.info("simulated %d aruco + %d blob measurements", len(dataset.arucos), len(dataset.blobs))
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    try:
        dataset = read_dataset(Path(args.dataset))
    except SchemaError as e:
        return _fail(EXIT_INVALID_INPUT, str(e))
    except OSError as e:
        return _fail(EXIT_IO, f"cannot read dataset: {e}")

    opts = PipelineOptions(
        huber_delta=args.huber_delta,
        cauchy_scale=args.cauchy_scale,
        gate_px=args.gate_px,
        refine=not args.no_refine,
    )
    t0 = time.perf_counter()
    try:
        result = run_pipeline(
            dataset.trajectory_unscaled, dataset.arucos, dataset.blobs, dataset.intrinsics, opts
        )
    except PipelineStageError as e:
        return _fail(EXIT_PIPELINE, str(e))
    t_run = (time.perf_counter() - t0) * 1e3

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = write_result(out_dir / "result.json", result, dataset.intrinsics, result.labeled_blobs)
        write_manifest(
            out_dir,
            "calibrate",
            {
                "huber_delta": opts.huber_delta,
                "cauchy_scale": opts.cauchy_scale,
                "gate_px": opts.gate_px,
                "refine": opts.refine,
            },
            None,
            [Path(args.dataset)],
            [path],
            {"pipeline": t_run},
        )
    except OSError as e:
        return _fail(EXIT_IO, f"cannot write outputs: {e}")
    log.info("calibrated %d cameras, scale %.6f", len(result.cameras), result.scale_offset.scale)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        bundle = read_result(Path(args.result))
    except SchemaError as e:
        return _fail(EXIT_INVALID_INPUT, str(e))
    except OSError as e:
        return _fail(EXIT_IO, f"cannot read result: {e}")

    reproj = reprojection_rmse(bundle.cameras, bundle.blobs, bundle.scaled_trajectory, bundle.intrinsics)
    rows = reprojection_residuals(bundle.cameras, bundle.blobs, bundle.scaled_trajectory, bundle.intrinsics)

    try:
        if args.ground_truth:
            gt = read_ground_truth(Path(args.ground_truth))
            rmsd = compare_to_ground_truth(bundle.cameras, gt.camera_poses_world, align=False)
        else:
            other = read_result(Path(args.other))
            rmsd = pose_rmsd(bundle.cameras, other.cameras)
    except SchemaError as e:
        return _fail(EXIT_INVALID_INPUT, str(e))
    except OSError as e:
        return _fail(EXIT_IO, f"cannot read comparison input: {e}")
    except TooFewCorrespondencesError as e:
        return _fail(EXIT_TOO_FEW, str(e))

    out_dir = Path(args.out)
    try:
        written = write_reports(out_dir, reproj, rmsd, rows)
        write_manifest(
            out_dir,
            "evaluate",
            None,
            None,
            [Path(args.result), Path(args.ground_truth or args.other)],
            written,
            {},
        )
    except OSError as e:
        return _fail(EXIT_IO, f"cannot write outputs: {e}")
    print((out_dir / "report.txt").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camreg",
        description="Register a ceiling camera network from robot fisheye odometry and bidirectional detections.",
    )
    parser.add_argument("--version", action="version", version=f"camreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scenario dataset")
    p.add_argument("--config", required=True, help="scenario config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("calibrate", help="run the three-stage registration on a dataset")
    p.add_argument("--dataset", required=True, help="directory written by simulate")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--huber-delta", type=float, default=1.0)
    p.add_argument("--cauchy-scale", type=float, default=1.0)
    p.add_argument("--gate-px", type=float, default=50.0)
    p.add_argument("--no-refine", action="store_true", help="skip blob-based position refinement")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("evaluate", help="reprojection RMSE and pose RMSD reports")
    p.add_argument("--result", required=True, help="result.json from calibrate")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ground-truth", help="ground_truth.json to compare against")
    group.add_argument("--other", help="second result.json to compare against")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
