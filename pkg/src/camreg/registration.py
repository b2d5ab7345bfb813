"""Three-stage registration of ceiling cameras from robot odometry and detections.

Stage 1 aligns relative fisheye motions with relative marker motions (a
hand-eye problem of the A X = X B family, with the odometry scale as an extra
unknown) to recover the metric scale and the fisheye-to-marker offset.
Stage 2 estimates each ceiling camera's world pose from its marker detections
("looking down"). Stage 3 refines camera positions by minimizing the
reprojection error of cameras detected in the fisheye image ("looking up");
rotations are left untouched.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fisheye import FisheyeIntrinsics, project_camera_point, project_fisheye
from .geometry import (
    OutOfRangeError,
    Pose,
    TimedPose,
    Trajectory,
    UnitQuaternion,
    ominus,
    pose_from_vec7,
    pose_to_vec7,
)
from .optimizer import LeastSquaresProblem, RobustLoss, SolveReport, SolverOptions, solve

__all__ = [
    "ArucoDetection",
    "BlobDetection",
    "MotionSegmentPair",
    "ScaleOffsetEstimate",
    "CameraEstimate",
    "CalibrationResult",
    "PipelineOptions",
    "InsufficientSegmentsError",
    "NoValidDetectionsError",
    "NonPositiveScaleError",
    "PipelineStageError",
    "build_motion_segments",
    "estimate_scale_and_offset",
    "apply_scale",
    "initialize_camera_pose",
    "estimate_camera_pose",
    "associate_blobs",
    "refine_camera_positions",
    "run_pipeline",
]

log = logging.getLogger(__name__)


class InsufficientSegmentsError(ValueError):
    """No usable motion segments; scale and offset cannot be estimated."""


class NoValidDetectionsError(ValueError):
    """A camera has no marker detections inside the trajectory span."""


class NonPositiveScaleError(ValueError):
    pass


class PipelineStageError(RuntimeError):
    """Wraps a stage failure so callers can name the failing stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ArucoDetection:
    """Marker pose measured by one ceiling camera (marker in camera frame)."""

    camera_id: int
    stamp: float
    pose_marker_in_camera: Pose

    def __post_init__(self):
        if self.camera_id < 0:
            raise ValueError(f"camera_id must be >= 0, got {self.camera_id}")


@dataclass(frozen=True)
class BlobDetection:
    """Pixel observation of a ceiling camera in the fisheye image at one keyframe.

    camera_id is filled by association; true_camera_id is a simulator-only
    label kept for oracle checks and never used by the pipeline.
    """

    keyframe_id: int
    pixel: tuple[float, float]
    camera_id: int | None = None
    true_camera_id: int | None = None


@dataclass(frozen=True)
class MotionSegmentPair:
    """Relative motions over one timestamp pair: fisheye (unscaled) vs marker (metric)."""

    fisheye_motion: Pose
    marker_motion: Pose
    dt: float
    camera_id: int


@dataclass
class ScaleOffsetEstimate:
    scale: float
    offset: Pose  # fisheye-to-marker transform
    report: SolveReport | None = None
    n_segments: int = 0
    degenerate_motion: bool = False
    insufficient_segments: bool = False


@dataclass
class CameraEstimate:
    camera_id: int
    pose_world: Pose
    n_aruco: int
    n_blob: int = 0
    refined: bool = False


@dataclass
class CalibrationResult:
    scale_offset: ScaleOffsetEstimate
    cameras: list[CameraEstimate]
    scaled_trajectory: Trajectory
    camera_reports: dict[int, SolveReport] = field(default_factory=dict)
    refinement_report: SolveReport | None = None
    labeled_blobs: list[BlobDetection] = field(default_factory=list)
    dropped_arucos: int = 0
    dropped_blobs: int = 0
    skipped_cameras: list[int] = field(default_factory=list)


@dataclass
class PipelineOptions:
    min_trans: float = 0.02  # m; segment kept if marker moved at least this...
    min_rot: float = 0.01  # rad; ...or rotated at least this
    huber_delta: float = 1.0
    cauchy_scale: float = 1.0
    pixel_sigma: float = 2.0  # px; reprojection residuals are divided by this
    gate_px: float = 50.0
    refine: bool = True
    min_refine_keyframes: int = 2
    solver: SolverOptions = field(default_factory=SolverOptions)


def build_motion_segments(
    traj: Trajectory,
    detections: Sequence[ArucoDetection],
    min_trans: float = 0.02,
    min_rot: float = 0.01,
) -> list[MotionSegmentPair]:
    """Pair time-adjacent marker detections per camera with interpolated fisheye motion.

    Segments where the marker neither moved min_trans nor rotated min_rot are
    discarded as degenerate; detections outside the trajectory span are skipped.
    """
    by_camera: dict[int, list[ArucoDetection]] = {}
    for det in detections:
        if traj.covers(det.stamp):
            by_camera.setdefault(det.camera_id, []).append(det)
    pairs: list[MotionSegmentPair] = []
    for cam_id in sorted(by_camera):
        dets = sorted(by_camera[cam_id], key=lambda d: d.stamp)
        for d0, d1 in zip(dets, dets[1:]):
            dt = d1.stamp - d0.stamp
            if dt <= 0.0:
                continue
            marker_motion = d0.pose_marker_in_camera.inverse().compose(d1.pose_marker_in_camera)
            angle = marker_motion.rotation.angle_to(UnitQuaternion.identity())
            if float(np.linalg.norm(marker_motion.translation)) < min_trans and angle < min_rot:
                continue
            fisheye_motion = traj.interpolate(d0.stamp).inverse().compose(traj.interpolate(d1.stamp))
            pairs.append(MotionSegmentPair(fisheye_motion, marker_motion, dt, cam_id))
    return pairs


def _rotation_axes(pairs: Sequence[MotionSegmentPair], min_angle: float) -> list[np.ndarray]:
    axes = []
    for p in pairs:
        phi = p.marker_motion.rotation.to_axis_angle()
        angle = float(np.linalg.norm(phi))
        if angle >= min_angle:
            axes.append(phi / angle)
    return axes


def _axes_parallel(axes: list[np.ndarray], tol_rad: float) -> bool:
    """True when every axis lies within tol_rad of one common line."""
    if len(axes) < 2:
        return True
    m = sum(np.outer(a, a) for a in axes)
    _, vecs = np.linalg.eigh(m)
    principal = vecs[:, -1]
    for a in axes:
        c = min(1.0, abs(float(a @ principal)))
        if math.acos(c) > tol_rad:
            return False
    return True


def estimate_scale_and_offset(
    pairs: Sequence[MotionSegmentPair],
    init_scale: float = 1.0,
    init_offset: Pose | None = None,
    huber_delta: float = 1.0,
    solver: SolverOptions | None = None,
    axis_tol_rad: float = math.radians(2.0),
) -> ScaleOffsetEstimate:
    """Estimate the odometry scale and the fisheye-to-marker offset jointly.

    Minimizes the robustified manifold difference between (scaled fisheye
    motion . offset) and (offset . marker motion) over all segments from all
    cameras. With fewer than 10 segments, or all rotation axes parallel, the
    corresponding observability flag is set on the result; the z-component of
    the offset translation is unreliable under purely planar motion.
    """
    pairs = list(pairs)
    if not pairs:
        raise InsufficientSegmentsError("no motion segments to estimate scale and offset from")
    problem = LeastSquaresProblem()
    problem.add_parameter_block("scale", [init_scale], manifold="scalar")
    problem.add_parameter_block(
        "offset", pose_to_vec7(init_offset or Pose.identity()), manifold="se3"
    )
    loss = RobustLoss.huber(huber_delta)

    def make_residual(pair: MotionSegmentPair):
        q_a = pair.fisheye_motion.rotation
        p_a = pair.fisheye_motion.translation
        marker = pair.marker_motion

        def residual(s: np.ndarray, offset_vec: np.ndarray) -> np.ndarray:
            offset = pose_from_vec7(offset_vec)
            scaled = Pose(q_a, s[0] * p_a)
            return ominus(scaled.compose(offset), offset.compose(marker)).vector

        return residual

    for pair in pairs:
        problem.add_residual_block(make_residual(pair), ("scale", "offset"), loss)

    report = solve(problem, solver)
    scale = float(problem.value("scale")[0])
    offset = pose_from_vec7(problem.value("offset"))
    axes = _rotation_axes(pairs, min_angle=1e-3)
    return ScaleOffsetEstimate(
        scale=scale,
        offset=offset,
        report=report,
        n_segments=len(pairs),
        degenerate_motion=_axes_parallel(axes, axis_tol_rad),
        insufficient_segments=len(pairs) < 10,
    )


def apply_scale(traj: Trajectory, s: float) -> Trajectory:
    """Multiply every translation by s; rotations and timestamps unchanged."""
    if not (s > 0.0 and math.isfinite(s)):
        raise NonPositiveScaleError(f"scale must be positive and finite, got {s}")
    return Trajectory(
        TimedPose(tp.stamp, Pose(tp.pose.rotation, s * tp.pose.translation), tp.keyframe_id)
        for tp in traj
    )


def initialize_camera_pose(det: ArucoDetection, traj: Trajectory, offset: Pose) -> Pose:
    """Closed-form camera pose from one detection: robot pose . offset . detection^-1."""
    robot = traj.interpolate(det.stamp)
    return robot.compose(offset).compose(det.pose_marker_in_camera.inverse())


def estimate_camera_pose(
    cam_id: int,
    detections: Sequence[ArucoDetection],
    traj: Trajectory,
    offset: Pose,
    huber_delta: float = 1.0,
    solver: SolverOptions | None = None,
) -> tuple[CameraEstimate, SolveReport]:
    """Estimate one camera's world pose from all its marker detections.

    Each detection i contributes the manifold difference between
    (camera pose . marker-in-camera_i) and (interpolated robot pose_i . offset).
    Initialized from the median-timestamp detection.
    """
    valid = sorted(
        (d for d in detections if d.camera_id == cam_id and traj.covers(d.stamp)),
        key=lambda d: d.stamp,
    )
    if not valid:
        raise NoValidDetectionsError(f"camera {cam_id} has no detections inside the trajectory span")
    targets = [traj.interpolate(d.stamp).compose(offset) for d in valid]
    init = targets[len(valid) // 2].compose(valid[len(valid) // 2].pose_marker_in_camera.inverse())

    problem = LeastSquaresProblem()
    problem.add_parameter_block("pose", pose_to_vec7(init), manifold="se3")
    loss = RobustLoss.huber(huber_delta)

    def make_residual(marker_in_cam: Pose, target_inv: Pose):
        def residual(pose_vec: np.ndarray) -> np.ndarray:
            cam = pose_from_vec7(pose_vec)
            d = target_inv.compose(cam).compose(marker_in_cam)
            return np.concatenate([d.translation, d.rotation.to_axis_angle()])

        return residual

    for det, target in zip(valid, targets):
        problem.add_residual_block(
            make_residual(det.pose_marker_in_camera, target.inverse()), ("pose",), loss
        )
    report = solve(problem, solver)
    est = CameraEstimate(cam_id, pose_from_vec7(problem.value("pose")), n_aruco=len(valid))
    return est, report


def associate_blobs(
    blobs: Sequence[BlobDetection],
    cameras: Sequence[CameraEstimate],
    traj: Trajectory,
    intr: FisheyeIntrinsics,
    gate_px: float = 50.0,
) -> list[BlobDetection]:
    """Label blobs with camera ids by nearest projected camera estimate.

    Greedy one-to-one matching per keyframe in ascending pixel distance; blobs
    farther than gate_px from every projection are dropped.
    """
    by_keyframe: dict[int, list[tuple[int, BlobDetection]]] = {}
    for i, b in enumerate(blobs):
        if traj.has_keyframe(b.keyframe_id):
            by_keyframe.setdefault(b.keyframe_id, []).append((i, b))
    labeled: list[tuple[int, BlobDetection]] = []
    for kf_id in sorted(by_keyframe):
        robot = traj.keyframe(kf_id).pose
        projections = []
        for cam in cameras:
            uv = project_fisheye(intr, robot, cam.pose_world.translation)
            if uv is not None:
                projections.append((cam.camera_id, uv))
        candidates = []
        for slot, (bi, blob) in enumerate(by_keyframe[kf_id]):
            for cam_id, (pu, pv) in projections:
                d = math.hypot(blob.pixel[0] - pu, blob.pixel[1] - pv)
                if d <= gate_px:
                    candidates.append((d, cam_id, slot))
        candidates.sort()
        used_cams: set[int] = set()
        used_blobs: set[int] = set()
        for d, cam_id, slot in candidates:
            if cam_id in used_cams or slot in used_blobs:
                continue
            used_cams.add(cam_id)
            used_blobs.add(slot)
            bi, blob = by_keyframe[kf_id][slot]
            labeled.append((bi, dataclasses.replace(blob, camera_id=cam_id)))
    labeled.sort(key=lambda item: item[0])  # preserve input order
    return [b for _, b in labeled]


def refine_camera_positions(
    cameras: Sequence[CameraEstimate],
    blobs: Sequence[BlobDetection],
    traj: Trajectory,
    intr: FisheyeIntrinsics,
    cauchy_scale: float = 1.0,
    pixel_sigma: float = 2.0,
    min_refine_keyframes: int = 2,
    solver: SolverOptions | None = None,
) -> tuple[list[CameraEstimate], SolveReport | None]:
    """Refine camera positions against fisheye pixel detections; rotations kept.

    A camera is refined only with blobs from at least min_refine_keyframes
    distinct keyframes (a single view under-determines a 3-D position); others
    keep their incoming pose and are flagged unrefined. A camera that leaves
    the field of view during iteration contributes a zero residual for that
    term (visibility weight 0).
    """
    by_cam: dict[int, list[BlobDetection]] = {}
    for b in blobs:
        if b.camera_id is not None and traj.has_keyframe(b.keyframe_id):
            by_cam.setdefault(b.camera_id, []).append(b)

    refine_ids = []
    for cam in cameras:
        obs = by_cam.get(cam.camera_id, [])
        if len({b.keyframe_id for b in obs}) >= min_refine_keyframes:
            refine_ids.append(cam.camera_id)
    if not refine_ids:
        out = [
            dataclasses.replace(cam, n_blob=len(by_cam.get(cam.camera_id, [])), refined=False)
            for cam in cameras
        ]
        return out, None

    inv_robot = {tp.keyframe_id: tp.pose.inverse() for tp in traj}
    problem = LeastSquaresProblem()
    loss = RobustLoss.cauchy(cauchy_scale)
    cam_by_id = {c.camera_id: c for c in cameras}
    for cam_id in refine_ids:
        problem.add_parameter_block(f"p{cam_id}", cam_by_id[cam_id].pose_world.translation)

    def make_residual(blob: BlobDetection):
        u0, v0 = blob.pixel
        robot_inv = inv_robot[blob.keyframe_id]

        def residual(p: np.ndarray) -> np.ndarray:
            uv = project_camera_point(intr, robot_inv.transform_point(p))
            if uv is None:
                return np.zeros(2)
            return np.array([(u0 - uv[0]) / pixel_sigma, (v0 - uv[1]) / pixel_sigma])

        return residual

    for cam_id in refine_ids:
        for blob in by_cam[cam_id]:
            problem.add_residual_block(make_residual(blob), (f"p{cam_id}",), loss)

    report = solve(problem, solver)
    refined_set = set(refine_ids)
    out = []
    for cam in cameras:
        n_blob = len(by_cam.get(cam.camera_id, []))
        if cam.camera_id in refined_set:
            pose = Pose(cam.pose_world.rotation, problem.value(f"p{cam.camera_id}"))
            out.append(dataclasses.replace(cam, pose_world=pose, n_blob=n_blob, refined=True))
        else:
            out.append(dataclasses.replace(cam, n_blob=n_blob, refined=False))
    return out, report


def run_pipeline(
    traj_unscaled: Trajectory,
    arucos: Sequence[ArucoDetection],
    blobs: Sequence[BlobDetection],
    intr: FisheyeIntrinsics,
    opts: PipelineOptions | None = None,
) -> CalibrationResult:
    """Run the full registration: scale/offset, per-camera poses, position refinement."""
    opts = opts or PipelineOptions()

    try:
        segments = build_motion_segments(traj_unscaled, arucos, opts.min_trans, opts.min_rot)
    except Exception as e:  # pragma: no cover - construction should not fail
        raise PipelineStageError("motion_segments", e) from e
    log.info("motion segments: %d from %d detections", len(segments), len(arucos))

    try:
        scale_offset = estimate_scale_and_offset(
            segments, huber_delta=opts.huber_delta, solver=opts.solver
        )
        if not (scale_offset.scale > 0.0 and math.isfinite(scale_offset.scale)):
            raise NonPositiveScaleError(f"estimated scale {scale_offset.scale} is not positive")
        scaled = apply_scale(traj_unscaled, scale_offset.scale)
    except PipelineStageError:
        raise
    except Exception as e:
        raise PipelineStageError("scale_offset", e) from e
    log.info(
        "scale=%.6f segments=%d degenerate=%s",
        scale_offset.scale,
        scale_offset.n_segments,
        scale_offset.degenerate_motion,
    )

    dropped_arucos = sum(1 for d in arucos if not scaled.covers(d.stamp))
    cameras: list[CameraEstimate] = []
    camera_reports: dict[int, SolveReport] = {}
    skipped: list[int] = []
    try:
        for cam_id in sorted({d.camera_id for d in arucos}):
            try:
                est, report = estimate_camera_pose(
                    cam_id, arucos, scaled, scale_offset.offset, opts.huber_delta, opts.solver
                )
            except NoValidDetectionsError:
                skipped.append(cam_id)
                continue
            cameras.append(est)
            camera_reports[cam_id] = report
    except Exception as e:
        raise PipelineStageError("camera_poses", e) from e
    log.info("estimated %d cameras (%d skipped)", len(cameras), len(skipped))

    refinement_report = None
    labeled: list[BlobDetection] = []
    dropped_blobs = 0
    if opts.refine and blobs:
        try:
            labeled = associate_blobs(blobs, cameras, scaled, intr, opts.gate_px)
            dropped_blobs = len(blobs) - len(labeled)
        except Exception as e:
            raise PipelineStageError("blob_association", e) from e
        try:
            cameras, refinement_report = refine_camera_positions(
                cameras,
                labeled,
                scaled,
                intr,
                opts.cauchy_scale,
                opts.pixel_sigma,
                opts.min_refine_keyframes,
                opts.solver,
            )
        except Exception as e:
            raise PipelineStageError("position_refinement", e) from e
        log.info(
            "refined %d/%d cameras (%d blobs dropped)",
            sum(c.refined for c in cameras),
            len(cameras),
            dropped_blobs,
        )
    else:
        cameras = [dataclasses.replace(c, refined=False) for c in cameras]
        dropped_blobs = len(blobs)

    return CalibrationResult(
        scale_offset=scale_offset,
        cameras=cameras,
        scaled_trajectory=scaled,
        camera_reports=camera_reports,
        refinement_report=refinement_report,
        labeled_blobs=labeled,
        dropped_arucos=dropped_arucos,
        dropped_blobs=dropped_blobs,
        skipped_cameras=skipped,
    )
