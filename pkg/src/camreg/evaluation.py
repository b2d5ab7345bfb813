"""Evaluation metrics: reprojection RMSE and cross-set pose RMSD after alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fisheye import FisheyeIntrinsics, project_fisheye
from .geometry import Pose, Trajectory, UnitQuaternion, rpy_zyx
from .registration import BlobDetection, CameraEstimate

__all__ = [
    "ReprojectionReport",
    "AlignmentTransform",
    "PoseRmsdReport",
    "TooFewCorrespondencesError",
    "DegenerateGeometryError",
    "reprojection_rmse",
    "reprojection_residuals",
    "align_point_sets",
    "pose_rmsd",
    "compare_to_ground_truth",
]


class TooFewCorrespondencesError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class ReprojectionReport:
    rmse_px: float
    per_camera_rmse_px: dict[int, float]
    n_terms: int


@dataclass(frozen=True)
class AlignmentTransform:
    """Similarity transform p -> scale * R p + t fitted between point sets."""

    rotation: UnitQuaternion
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        t = np.array(self.translation, dtype=float).reshape(3)
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    def apply(self, p: Sequence[float]) -> np.ndarray:
        return self.scale * self.rotation.rotate(p) + self.translation

    def inverse(self) -> "AlignmentTransform":
        qi = self.rotation.conjugate()
        return AlignmentTransform(qi, -qi.rotate(self.translation) / self.scale, 1.0 / self.scale)


@dataclass
class PoseRmsdReport:
    rot_rmsd_deg: tuple[float, float, float]  # roll, pitch, yaw
    trans_rmsd_m: tuple[float, float, float]  # x, y, z
    n_matched: int


def reprojection_residuals(
    cameras: Sequence[CameraEstimate],
    blobs: Sequence[BlobDetection],
    traj: Trajectory,
    intr: FisheyeIntrinsics,
) -> list[tuple[int, int, float, float]]:
    """Per-blob residuals (camera_id, keyframe_id, du, dv) over visible labeled blobs."""
    cam_by_id = {c.camera_id: c for c in cameras}
    rows = []
    for b in blobs:
        if b.camera_id is None or b.camera_id not in cam_by_id or not traj.has_keyframe(b.keyframe_id):
            continue
        robot = traj.keyframe(b.keyframe_id).pose
        uv = project_fisheye(intr, robot, cam_by_id[b.camera_id].pose_world.translation)
        if uv is None:
            continue
        rows.append((b.camera_id, b.keyframe_id, b.pixel[0] - uv[0], b.pixel[1] - uv[1]))
    return rows


def reprojection_rmse(
    cameras: Sequence[CameraEstimate],
    blobs: Sequence[BlobDetection],
    traj: Trajectory,
    intr: FisheyeIntrinsics,
) -> ReprojectionReport:
    """Unrobustified RMSE of pixel reprojection errors over associated blobs."""
    rows = reprojection_residuals(cameras, blobs, traj, intr)
    per_cam_sq: dict[int, list[float]] = {}
    for cam_id, _, du, dv in rows:
        per_cam_sq.setdefault(cam_id, []).append(du * du + dv * dv)
    all_sq = [s for sqs in per_cam_sq.values() for s in sqs]
    rmse = math.sqrt(sum(all_sq) / len(all_sq)) if all_sq else 0.0
    per_cam = {cid: math.sqrt(sum(sqs) / len(sqs)) for cid, sqs in sorted(per_cam_sq.items())}
    return ReprojectionReport(rmse_px=rmse, per_camera_rmse_px=per_cam, n_terms=len(rows))


def align_point_sets(
    source: Sequence[tuple[int, Sequence[float]]],
    target: Sequence[tuple[int, Sequence[float]]],
    with_scale: bool = False,
) -> AlignmentTransform:
    """Closed-form least-squares rigid/similarity alignment of matched points.

    Umeyama-style: centroid subtraction plus SVD of the cross-covariance, with
    a reflection guard. Applying the result to source minimizes the sum of
    squared distances to target over the common ids.
    """
    src = dict((int(i), np.asarray(p, dtype=float)) for i, p in source)
    tgt = dict((int(i), np.asarray(p, dtype=float)) for i, p in target)
    common = sorted(set(src) & set(tgt))
    if len(common) < 3:
        raise TooFewCorrespondencesError(f"need >= 3 common ids, got {len(common)}")
    x = np.stack([src[i] for i in common])
    y = np.stack([tgt[i] for i in common])
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    sing = np.linalg.svd(xc, compute_uv=False)
    if sing[1] < 1e-9 * max(sing[0], 1e-12):
        raise DegenerateGeometryError("source points are collinear; alignment is unconstrained")
    cov = (yc.T @ xc) / len(common)
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    if with_scale:
        var_x = float((xc * xc).sum()) / len(common)
        scale = float(np.trace(np.diag(d) @ s)) / var_x
    else:
        scale = 1.0
    t = mu_y - scale * rot @ mu_x
    return AlignmentTransform(UnitQuaternion.from_matrix(rot), t, scale)


def _paired_cameras(
    set_a: Sequence[CameraEstimate], set_b: Sequence[CameraEstimate]
) -> list[tuple[CameraEstimate, CameraEstimate]]:
    a_by_id = {c.camera_id: c for c in set_a}
    b_by_id = {c.camera_id: c for c in set_b}
    common = sorted(set(a_by_id) & set(b_by_id))
    if len(common) < 3:
        raise TooFewCorrespondencesError(f"need >= 3 common cameras, got {len(common)}")
    return [(a_by_id[i], b_by_id[i]) for i in common]


def _rmsd_report(
    pairs: Sequence[tuple[CameraEstimate, CameraEstimate]], align: AlignmentTransform
) -> PoseRmsdReport:
    trans_sq = np.zeros(3)
    rot_sq = np.zeros(3)
    for a, b in pairs:
        d = a.pose_world.translation - align.apply(b.pose_world.translation)
        trans_sq += d * d
        rel = a.pose_world.rotation.conjugate() * (align.rotation * b.pose_world.rotation)
        roll, pitch, yaw = rpy_zyx(rel)
        rot_sq += np.array([roll, pitch, yaw]) ** 2
    n = len(pairs)
    trans = np.sqrt(trans_sq / n)
    rot = np.degrees(np.sqrt(rot_sq / n))
    return PoseRmsdReport(
        rot_rmsd_deg=(float(rot[0]), float(rot[1]), float(rot[2])),
        trans_rmsd_m=(float(trans[0]), float(trans[1]), float(trans[2])),
        n_matched=n,
    )


def pose_rmsd(set_a: Sequence[CameraEstimate], set_b: Sequence[CameraEstimate]) -> PoseRmsdReport:
    """Per-axis RMSD between two camera sets after rigid alignment of b onto a.

    Rotations are compared as ZYX roll-pitch-yaw of the relative rotation once
    the alignment rotation has been applied to set_b.
    """
    pairs = _paired_cameras(set_a, set_b)
    align = align_point_sets(
        [(b.camera_id, b.pose_world.translation) for _, b in pairs],
        [(a.camera_id, a.pose_world.translation) for a, _ in pairs],
        with_scale=False,
    )
    return _rmsd_report(pairs, align)


def compare_to_ground_truth(
    est: Sequence[CameraEstimate],
    gt_cameras: Sequence[tuple[int, Pose]],
    align: bool = False,
) -> PoseRmsdReport:
    """RMSD of estimates against ground-truth camera poses.

    Gauge-fixed runs share the ground-truth world frame, so the default
    compares directly; pass align=True to factor out a rigid offset first.
    """
    gt_est = [CameraEstimate(cid, pose, n_aruco=0) for cid, pose in gt_cameras]
    if align:
        return pose_rmsd(gt_est, list(est))
    pairs = _paired_cameras(gt_est, list(est))
    identity = AlignmentTransform(UnitQuaternion.identity(), np.zeros(3), 1.0)
    return _rmsd_report(pairs, identity)
