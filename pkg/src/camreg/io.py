"""File formats: line-delimited JSON for measurement streams, JSON documents for
configs, results and reports. All angles radians, lengths meters, timestamps
seconds; poses serialize as [qw, qx, qy, qz, tx, ty, tz] in canonical sign.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .evaluation import PoseRmsdReport, ReprojectionReport
from .fisheye import FisheyeIntrinsics
from .geometry import Pose, TimedPose, Trajectory, pose_from_vec7, pose_to_vec7
from .optimizer import SolveReport
from .registration import ArucoDetection, BlobDetection, CalibrationResult, CameraEstimate
from .simulator import (
    Dataset,
    NoiseConfig,
    ScenarioConfig,
    ScenarioGroundTruth,
    TrajectoryConfig,
)

__all__ = [
    "SchemaError",
    "ResultBundle",
    "pose_to_list",
    "pose_from_list",
    "scenario_config_to_dict",
    "scenario_config_from_dict",
    "write_dataset",
    "read_dataset",
    "write_ground_truth",
    "read_ground_truth",
    "write_result",
    "read_result",
    "write_reports",
    "write_manifest",
    "file_digest",
]

DATASET_FILES = ("dataset.jsonl", "trajectory.jsonl", "intrinsics.json", "ground_truth.json")


class SchemaError(ValueError):
    """An input file does not match the expected schema."""


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path.name}: invalid JSON ({e})") from e


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def pose_to_list(p: Pose) -> list[float]:
    return [float(v) for v in pose_to_vec7(p)]


def pose_from_list(v: Sequence[float], where: str = "pose") -> Pose:
    if len(v) != 7:
        raise SchemaError(f"{where}: expected 7 numbers [qw qx qy qz tx ty tz], got {len(v)}")
    vals = [float(x) for x in v]
    if not all(math.isfinite(x) for x in vals):
        raise SchemaError(f"{where}: non-finite values")
    try:
        return pose_from_vec7(vals)
    except ValueError as e:
        raise SchemaError(f"{where}: {e}") from e


# ---------------------------------------------------------------------------
# scenario config


def scenario_config_to_dict(cfg: ScenarioConfig) -> dict:
    return {
        "n_cameras": cfg.n_cameras,
        "ceiling_height_range": list(cfg.ceiling_height_range),
        "area": list(cfg.area),
        "trajectory": {
            "speed": cfg.trajectory.speed,
            "keyframe_rate": cfg.trajectory.keyframe_rate,
            "roll_pitch_excitation": cfg.trajectory.roll_pitch_excitation,
            "robot_height": cfg.trajectory.robot_height,
            "waypoints": None
            if cfg.trajectory.waypoints is None
            else [list(w) for w in cfg.trajectory.waypoints],
            "row_spacing": cfg.trajectory.row_spacing,
            "margin": cfg.trajectory.margin,
        },
        "true_scale": cfg.true_scale,
        "true_offset": pose_to_list(cfg.true_offset),
        "aruco_fov_half_angle": cfg.aruco_fov_half_angle,
        "camera_tilt_max": cfg.camera_tilt_max,
        "noise": dataclasses.asdict(cfg.noise),
        "seed": cfg.seed,
        "noise_seed": cfg.noise_seed,
    }


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise SchemaError(f"{where}: unknown field(s) {sorted(unknown)}")


def scenario_config_from_dict(d: dict) -> ScenarioConfig:
    if not isinstance(d, dict):
        raise SchemaError("config: expected a JSON object")
    _check_keys(
        d,
        {
            "n_cameras",
            "ceiling_height_range",
            "area",
            "trajectory",
            "true_scale",
            "true_offset",
            "aruco_fov_half_angle",
            "camera_tilt_max",
            "noise",
            "seed",
            "noise_seed",
        },
        "config",
    )
    kwargs: dict[str, Any] = {}
    try:
        if "n_cameras" in d:
            kwargs["n_cameras"] = int(d["n_cameras"])
        if "ceiling_height_range" in d:
            kwargs["ceiling_height_range"] = tuple(float(v) for v in d["ceiling_height_range"])
        if "area" in d:
            kwargs["area"] = tuple(float(v) for v in d["area"])
        if "trajectory" in d:
            t = d["trajectory"]
            _check_keys(
                t,
                {"speed", "keyframe_rate", "roll_pitch_excitation", "robot_height", "waypoints", "row_spacing", "margin"},
                "config.trajectory",
            )
            tkw = {k: float(v) for k, v in t.items() if k != "waypoints"}
            if t.get("waypoints") is not None:
                tkw["waypoints"] = tuple((float(x), float(y)) for x, y in t["waypoints"])
            kwargs["trajectory"] = TrajectoryConfig(**tkw)
        if "true_scale" in d:
            kwargs["true_scale"] = float(d["true_scale"])
        if "true_offset" in d:
            kwargs["true_offset"] = pose_from_list(d["true_offset"], "config.true_offset")
        if "aruco_fov_half_angle" in d:
            kwargs["aruco_fov_half_angle"] = float(d["aruco_fov_half_angle"])
        if "camera_tilt_max" in d:
            kwargs["camera_tilt_max"] = float(d["camera_tilt_max"])
        if "noise" in d:
            _check_keys(
                d["noise"],
                {"aruco_trans_sigma", "aruco_rot_sigma", "blob_pixel_sigma", "timestamp_jitter_sigma", "outlier_fraction"},
                "config.noise",
            )
            kwargs["noise"] = NoiseConfig(**{k: float(v) for k, v in d["noise"].items()})
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if d.get("noise_seed") is not None:
            kwargs["noise_seed"] = int(d["noise_seed"])
    except (TypeError, ValueError) as e:
        raise SchemaError(f"config: {e}") from e
    return ScenarioConfig(**kwargs)


# ---------------------------------------------------------------------------
# intrinsics


def intrinsics_to_dict(intr: FisheyeIntrinsics) -> dict:
    return dataclasses.asdict(intr)


def intrinsics_from_dict(d: dict, where: str = "intrinsics") -> FisheyeIntrinsics:
    _check_keys(d, {f.name for f in dataclasses.fields(FisheyeIntrinsics)}, where)
    try:
        return FisheyeIntrinsics(
            **{
                k: (int(v) if k in ("width", "height") else float(v))
                for k, v in d.items()
            }
        )
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{where}: {e}") from e


# ---------------------------------------------------------------------------
# trajectory


def _trajectory_records(traj: Trajectory) -> list[dict]:
    return [
        {"keyframe_id": tp.keyframe_id, "stamp": tp.stamp, "pose": pose_to_list(tp.pose)}
        for tp in traj
    ]


def _trajectory_from_records(records: Sequence[dict], where: str) -> Trajectory:
    samples = []
    for i, rec in enumerate(records):
        try:
            samples.append(
                TimedPose(
                    float(rec["stamp"]),
                    pose_from_list(rec["pose"], f"{where}[{i}].pose"),
                    int(rec["keyframe_id"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{where}[{i}]: {e}") from e
    try:
        return Trajectory(samples)
    except ValueError as e:
        raise SchemaError(f"{where}: {e}") from e


# ---------------------------------------------------------------------------
# dataset


def write_dataset(out_dir: Path, dataset: Dataset) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "dataset.jsonl"
    with path.open("w") as f:
        for det in dataset.arucos:
            f.write(
                _dump(
                    {
                        "type": "aruco",
                        "camera_id": det.camera_id,
                        "stamp": det.stamp,
                        "pose": pose_to_list(det.pose_marker_in_camera),
                    }
                )
                + "\n"
            )
        for blob in dataset.blobs:
            rec = {
                "type": "blob",
                "keyframe_id": blob.keyframe_id,
                "pixel": [blob.pixel[0], blob.pixel[1]],
            }
            if blob.true_camera_id is not None:
                rec["true_camera_id"] = blob.true_camera_id
            f.write(_dump(rec) + "\n")
    written.append(path)

    path = out_dir / "trajectory.jsonl"
    with path.open("w") as f:
        for rec in _trajectory_records(dataset.trajectory_unscaled):
            f.write(_dump(rec) + "\n")
    written.append(path)

    path = out_dir / "intrinsics.json"
    _write_json(path, intrinsics_to_dict(dataset.intrinsics))
    written.append(path)
    return written


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path.name}:{n}: invalid JSON ({e})") from e
    return records


def read_dataset(dataset_dir: Path) -> Dataset:
    dataset_dir = Path(dataset_dir)
    for name in ("dataset.jsonl", "trajectory.jsonl", "intrinsics.json"):
        if not (dataset_dir / name).is_file():
            raise SchemaError(f"missing dataset file {name}")
    intr = intrinsics_from_dict(_read_json(dataset_dir / "intrinsics.json"))
    traj = _trajectory_from_records(_read_jsonl(dataset_dir / "trajectory.jsonl"), "trajectory")

    arucos: list[ArucoDetection] = []
    blobs: list[BlobDetection] = []
    for i, rec in enumerate(_read_jsonl(dataset_dir / "dataset.jsonl")):
        where = f"dataset[{i}]"
        kind = rec.get("type")
        try:
            if kind == "aruco":
                stamp = float(rec["stamp"])
                if not math.isfinite(stamp) or stamp < 0.0:
                    raise SchemaError(f"{where}.stamp: must be finite and >= 0")
                arucos.append(
                    ArucoDetection(
                        int(rec["camera_id"]), stamp, pose_from_list(rec["pose"], f"{where}.pose")
                    )
                )
            elif kind == "blob":
                u, v = (float(x) for x in rec["pixel"])
                if not (0.0 <= u <= intr.width - 1 and 0.0 <= v <= intr.height - 1):
                    raise SchemaError(f"{where}.pixel: ({u}, {v}) outside image bounds")
                tc = rec.get("true_camera_id")
                blobs.append(
                    BlobDetection(
                        int(rec["keyframe_id"]),
                        (u, v),
                        camera_id=None,
                        true_camera_id=None if tc is None else int(tc),
                    )
                )
            else:
                raise SchemaError(f"{where}.type: expected 'aruco' or 'blob', got {kind!r}")
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"{where}: {e}") from e
    return Dataset(traj, arucos, blobs, intr)


# ---------------------------------------------------------------------------
# ground truth


def write_ground_truth(out_dir: Path, gt: ScenarioGroundTruth) -> Path:
    path = Path(out_dir) / "ground_truth.json"
    _write_json(
        path,
        {
            "scale": gt.scale,
            "offset": pose_to_list(gt.offset),
            "cameras": [
                {"id": cid, "pose": pose_to_list(pose)} for cid, pose in gt.camera_poses_world
            ],
            "trajectory_metric": _trajectory_records(gt.robot_trajectory_metric),
        },
    )
    return path


def read_ground_truth(path: Path) -> ScenarioGroundTruth:
    d = _read_json(Path(path))
    try:
        cameras = [
            (int(c["id"]), pose_from_list(c["pose"], f"ground_truth.cameras[{i}]"))
            for i, c in enumerate(d["cameras"])
        ]
        traj = _trajectory_from_records(d["trajectory_metric"], "ground_truth.trajectory_metric")
        return ScenarioGroundTruth(cameras, traj, pose_from_list(d["offset"], "ground_truth.offset"), float(d["scale"]))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"ground_truth: {e}") from e


# ---------------------------------------------------------------------------
# calibration result


@dataclasses.dataclass
class ResultBundle:
    """Everything needed to evaluate a calibration run, as read back from disk."""

    scale: float
    offset: Pose
    cameras: list[CameraEstimate]
    scaled_trajectory: Trajectory
    blobs: list[BlobDetection]
    intrinsics: FisheyeIntrinsics
    flags: dict
    counters: dict


def _report_to_dict(r: SolveReport | None) -> dict | None:
    if r is None:
        return None
    return {
        "converged": r.converged,
        "iterations": r.iterations,
        "initial_cost": r.initial_cost,
        "final_cost": r.final_cost,
        "termination_reason": r.termination_reason,
    }


def write_result(path: Path, result: CalibrationResult, intr: FisheyeIntrinsics, blobs: Sequence[BlobDetection]) -> Path:
    """Write a self-contained result document (poses, reports, trajectory, blobs)."""
    labeled = [b for b in blobs if b.camera_id is not None]
    doc = {
        "scale": result.scale_offset.scale,
        "marker_offset": pose_to_list(result.scale_offset.offset),
        "n_segments": result.scale_offset.n_segments,
        "flags": {
            "degenerate_motion": result.scale_offset.degenerate_motion,
            "insufficient_segments": result.scale_offset.insufficient_segments,
        },
        "cameras": [
            {
                "id": c.camera_id,
                "pose": pose_to_list(c.pose_world),
                "n_aruco": c.n_aruco,
                "n_blob": c.n_blob,
                "refined": c.refined,
            }
            for c in result.cameras
        ],
        "reports": {
            "scale_offset": _report_to_dict(result.scale_offset.report),
            "cameras": {str(cid): _report_to_dict(r) for cid, r in sorted(result.camera_reports.items())},
            "refinement": _report_to_dict(result.refinement_report),
        },
        "counters": {
            "dropped_arucos": result.dropped_arucos,
            "dropped_blobs": result.dropped_blobs,
            "skipped_cameras": result.skipped_cameras,
        },
        "scaled_trajectory": _trajectory_records(result.scaled_trajectory),
        "blobs": [
            {"keyframe_id": b.keyframe_id, "pixel": [b.pixel[0], b.pixel[1]], "camera_id": b.camera_id}
            for b in labeled
        ],
        "intrinsics": intrinsics_to_dict(intr),
    }
    path = Path(path)
    _write_json(path, doc)
    return path


def read_result(path: Path) -> ResultBundle:
    d = _read_json(Path(path))
    try:
        cameras = [
            CameraEstimate(
                int(c["id"]),
                pose_from_list(c["pose"], f"result.cameras[{i}]"),
                n_aruco=int(c["n_aruco"]),
                n_blob=int(c["n_blob"]),
                refined=bool(c["refined"]),
            )
            for i, c in enumerate(d["cameras"])
        ]
        traj = _trajectory_from_records(d["scaled_trajectory"], "result.scaled_trajectory")
        blobs = [
            BlobDetection(int(b["keyframe_id"]), (float(b["pixel"][0]), float(b["pixel"][1])), camera_id=int(b["camera_id"]))
            for b in d["blobs"]
        ]
        return ResultBundle(
            scale=float(d["scale"]),
            offset=pose_from_list(d["marker_offset"], "result.marker_offset"),
            cameras=cameras,
            scaled_trajectory=traj,
            blobs=blobs,
            intrinsics=intrinsics_from_dict(d["intrinsics"], "result.intrinsics"),
            flags=dict(d["flags"]),
            counters=dict(d["counters"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"result: {e}") from e


# ---------------------------------------------------------------------------
# evaluation reports


def write_reports(
    out_dir: Path,
    reprojection: ReprojectionReport | None,
    rmsd: PoseRmsdReport | None,
    residual_rows: Sequence[tuple[int, int, float, float]] = (),
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    doc: dict[str, Any] = {"reprojection": None, "pose_rmsd": None}
    if reprojection is not None:
        doc["reprojection"] = {
            "rmse_px": reprojection.rmse_px,
            "per_camera_rmse_px": {str(k): v for k, v in reprojection.per_camera_rmse_px.items()},
            "n_terms": reprojection.n_terms,
        }
    if rmsd is not None:
        doc["pose_rmsd"] = {
            "rot_rmsd_deg": {"roll": rmsd.rot_rmsd_deg[0], "pitch": rmsd.rot_rmsd_deg[1], "yaw": rmsd.rot_rmsd_deg[2]},
            "trans_rmsd_m": {"x": rmsd.trans_rmsd_m[0], "y": rmsd.trans_rmsd_m[1], "z": rmsd.trans_rmsd_m[2]},
            "n_matched": rmsd.n_matched,
        }
    path = out_dir / "report.json"
    _write_json(path, doc)
    written.append(path)

    lines = []
    if reprojection is not None:
        lines.append("Reprojection error (pixel, RMSE)")
        lines.append(f"  overall: {reprojection.rmse_px:.3f}  (terms: {reprojection.n_terms})")
        lines.append("  camera     rmse")
        for cid, v in reprojection.per_camera_rmse_px.items():
            lines.append(f"  {cid:>6d}  {v:>8.3f}")
        lines.append("")
    if rmsd is not None:
        lines.append("RMSD between corresponding cameras")
        lines.append("     roll[deg]  pitch[deg]  yaw[deg]      X[m]      Y[m]      Z[m]")
        r, t = rmsd.rot_rmsd_deg, rmsd.trans_rmsd_m
        lines.append(
            f"    {r[0]:>9.4f}  {r[1]:>9.4f}  {r[2]:>9.4f}  {t[0]:>8.4f}  {t[1]:>8.4f}  {t[2]:>8.4f}"
        )
        lines.append(f"    matched cameras: {rmsd.n_matched}")
        lines.append("")
    path = out_dir / "report.txt"
    path.write_text("\n".join(lines) + "\n" if lines else "")
    written.append(path)

    path = out_dir / "residuals.csv"
    with path.open("w") as f:
        f.write("camera_id,keyframe_id,du,dv,norm\n")
        for cid, kid, du, dv in residual_rows:
            f.write(f"{cid},{kid},{du!r},{dv!r},{math.hypot(du, dv)!r}\n")
    written.append(path)
    return written


# ---------------------------------------------------------------------------
# run manifest


def write_manifest(
    out_dir: Path,
    command: str,
    config_snapshot: dict | None,
    seed: int | None,
    input_paths: Sequence[Path],
    output_paths: Sequence[Path],
    timings_ms: dict[str, float],
) -> Path:
    out_dir = Path(out_dir)
    doc = {
        "tool": "camreg",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config_snapshot,
        "inputs": [str(p) for p in input_paths],
        "outputs": {
            p.name: {"sha256": file_digest(p), "bytes": p.stat().st_size} for p in output_paths
        },
        "timings_ms": {k: round(v, 3) for k, v in timings_ms.items()},
    }
    path = out_dir / "manifest.json"
    _write_json(path, doc)
    return path
