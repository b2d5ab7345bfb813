"""Synthetic scenarios: a ceiling camera grid, a robot loop, and all measurements.

Generation is split into two RNG streams so the same layout seed can be paired
with different noise seeds: two "drives" under the same ceiling. Everything is
deterministic given the config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fisheye import FisheyeIntrinsics, project_fisheye
from .geometry import Pose, TimedPose, Trajectory, UnitQuaternion
from .registration import ArucoDetection, BlobDetection

__all__ = [
    "TrajectoryConfig",
    "NoiseConfig",
    "ScenarioConfig",
    "ScenarioGroundTruth",
    "Dataset",
    "InvalidConfigError",
    "default_fisheye_intrinsics",
    "default_marker_offset",
    "generate_scenario",
    "simulate_aruco_detections",
    "simulate_blob_detections",
]


class InvalidConfigError(ValueError):
    pass


def default_fisheye_intrinsics() -> FisheyeIntrinsics:
    """A 160-degree upward fisheye whose FoV circle fits a 1920x1080 image."""
    return FisheyeIntrinsics(
        fx=370.0,
        fy=370.0,
        cx=959.5,
        cy=539.5,
        k1=-0.02,
        k2=0.002,
        width=1920,
        height=1080,
        max_fov=math.radians(160.0),
    )


def default_marker_offset() -> Pose:
    """Fisheye-to-marker transform: marker a little off-center, slightly twisted."""
    return Pose(UnitQuaternion.from_rpy(0.03, -0.02, math.radians(25.0)), [0.06, -0.04, -0.12])


@dataclass(frozen=True)
class TrajectoryConfig:
    speed: float = 1.0  # m/s along the path
    keyframe_rate: float = 2.0  # Hz
    roll_pitch_excitation: float = 0.05  # rad; 0 reproduces planar-motion degeneracy
    robot_height: float = 0.3  # m, fisheye above the floor
    waypoints: tuple[tuple[float, float], ...] | None = None  # closed loop; None = lawnmower
    row_spacing: float = 3.5  # m between lawnmower rows
    margin: float = 2.0  # m clearance from the area boundary


@dataclass(frozen=True)
class NoiseConfig:
    aruco_trans_sigma: float = 0.005  # m
    aruco_rot_sigma: float = math.radians(0.5)  # rad, axis-angle
    blob_pixel_sigma: float = 1.0  # px
    timestamp_jitter_sigma: float = 0.0015  # s
    outlier_fraction: float = 0.02  # gross marker-pose outliers

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ScenarioConfig:
    n_cameras: int = 40
    ceiling_height_range: tuple[float, float] = (3.0, 4.0)
    area: tuple[float, float] = (40.0, 20.0)  # m
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    true_scale: float = 2.5
    true_offset: Pose = field(default_factory=default_marker_offset)
    aruco_fov_half_angle: float = 0.7  # rad, ceiling camera view cone
    camera_tilt_max: float = 0.09  # rad, max deviation from straight down
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    noise_seed: int | None = None  # None: derived from seed

    def validation_errors(self) -> list[str]:
        errs = []
        if self.n_cameras < 1:
            errs.append(f"n_cameras must be >= 1, got {self.n_cameras}")
        lo, hi = self.ceiling_height_range
        if not (0.0 < lo <= hi):
            errs.append(f"ceiling_height_range must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.area[0] <= 0.0 or self.area[1] <= 0.0:
            errs.append(f"area extents must be positive, got {self.area}")
        if self.true_scale <= 0.0:
            errs.append(f"true_scale must be positive, got {self.true_scale}")
        if not 0.0 < self.aruco_fov_half_angle < math.pi / 2:
            errs.append(f"aruco_fov_half_angle must be in (0, pi/2), got {self.aruco_fov_half_angle}")
        if self.camera_tilt_max < 0.0:
            errs.append(f"camera_tilt_max must be >= 0, got {self.camera_tilt_max}")
        t = self.trajectory
        if t.speed <= 0.0:
            errs.append(f"trajectory.speed must be positive, got {t.speed}")
        if t.keyframe_rate <= 0.0:
            errs.append(f"trajectory.keyframe_rate must be positive, got {t.keyframe_rate}")
        if t.roll_pitch_excitation < 0.0:
            errs.append(f"trajectory.roll_pitch_excitation must be >= 0, got {t.roll_pitch_excitation}")
        if t.robot_height <= 0.0 or t.robot_height >= lo:
            errs.append(f"trajectory.robot_height must be in (0, ceiling min), got {t.robot_height}")
        if t.waypoints is not None and len(t.waypoints) < 2:
            errs.append("trajectory.waypoints needs at least 2 points")
        n = self.noise
        for name in ("aruco_trans_sigma", "aruco_rot_sigma", "blob_pixel_sigma", "timestamp_jitter_sigma"):
            if getattr(n, name) < 0.0:
                errs.append(f"noise.{name} must be >= 0, got {getattr(n, name)}")
        if not 0.0 <= n.outlier_fraction <= 1.0:
            errs.append(f"noise.outlier_fraction must be in [0, 1], got {n.outlier_fraction}")
        return errs

    def validate(self) -> None:
        errs = self.validation_errors()
        if errs:
            raise InvalidConfigError("; ".join(errs))


@dataclass
class ScenarioGroundTruth:
    camera_poses_world: list[tuple[int, Pose]]
    robot_trajectory_metric: Trajectory
    offset: Pose
    scale: float


@dataclass
class Dataset:
    trajectory_unscaled: Trajectory
    arucos: list[ArucoDetection]
    blobs: list[BlobDetection]
    intrinsics: FisheyeIntrinsics


def _noise_rngs(cfg: ScenarioConfig) -> tuple[np.random.Generator, np.random.Generator]:
    base = cfg.noise_seed if cfg.noise_seed is not None else cfg.seed + 1_000_003
    aruco_ss, blob_ss = np.random.SeedSequence(base).spawn(2)
    return np.random.default_rng(aruco_ss), np.random.default_rng(blob_ss)


def _lawnmower_waypoints(area: tuple[float, float], margin: float, row_spacing: float) -> list[tuple[float, float]]:
    ax, ay = area
    x0, x1 = margin, max(margin, ax - margin)
    y0, y1 = margin, max(margin, ay - margin)
    n_rows = max(2, int(math.ceil((y1 - y0) / row_spacing)) + 1)
    ys = np.linspace(y0, y1, n_rows)
    pts: list[tuple[float, float]] = []
    for i, y in enumerate(ys):
        if i % 2 == 0:
            pts += [(x0, float(y)), (x1, float(y))]
        else:
            pts += [(x1, float(y)), (x0, float(y))]
    pts.append(pts[0])  # close the loop
    return pts


def _sample_loop(cfg: TrajectoryConfig, area: tuple[float, float]) -> Trajectory:
    pts = list(cfg.waypoints) if cfg.waypoints is not None else _lawnmower_waypoints(
        area, cfg.margin, cfg.row_spacing
    )
    segs = []
    lengths = []
    for (xa, ya), (xb, yb) in zip(pts, pts[1:]):
        length = math.hypot(xb - xa, yb - ya)
        if length > 1e-9:
            segs.append(((xa, ya), (xb, yb)))
            lengths.append(length)
    if not segs:
        raise InvalidConfigError("trajectory.waypoints describe a zero-length path")
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = float(cum[-1])
    n_kf = int(math.floor(total / cfg.speed * cfg.keyframe_rate)) + 1
    samples = []
    for k in range(n_kf):
        t = k / cfg.keyframe_rate
        s = min(cfg.speed * t, total - 1e-12)
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(i, len(segs) - 1)
        (xa, ya), (xb, yb) = segs[i]
        frac = (s - cum[i]) / lengths[i]
        x = xa + frac * (xb - xa)
        y = ya + frac * (yb - ya)
        yaw = math.atan2(yb - ya, xb - xa)
        roll = cfg.roll_pitch_excitation * math.sin(1.7 * t)
        pitch = cfg.roll_pitch_excitation * math.sin(2.3 * t + 1.3)
        pose = Pose(UnitQuaternion.from_rpy(roll, pitch, yaw), [x, y, cfg.robot_height])
        samples.append(TimedPose(t, pose, k))
    return Trajectory(samples)


def _camera_grid(cfg: ScenarioConfig, rng: np.random.Generator) -> list[tuple[int, Pose]]:
    ax, ay = cfg.area
    nx = max(1, int(math.ceil(math.sqrt(cfg.n_cameras * ax / ay))))
    ny = max(1, int(math.ceil(cfg.n_cameras / nx)))
    cell_x, cell_y = ax / nx, ay / ny
    down = UnitQuaternion.from_rpy(math.pi, 0.0, 0.0)  # optical axis toward the floor
    cams = []
    for k in range(cfg.n_cameras):
        ix, iy = k % nx, k // nx
        x = (ix + 0.5) * cell_x + rng.uniform(-0.2, 0.2) * cell_x
        y = (iy + 0.5) * cell_y + rng.uniform(-0.2, 0.2) * cell_y
        z = rng.uniform(*cfg.ceiling_height_range)
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        tilt = rng.uniform(0.0, cfg.camera_tilt_max)
        tilt_dir = rng.uniform(0.0, 2.0 * math.pi)
        q = (
            UnitQuaternion.from_axis_angle([0.0, 0.0, yaw])
            * UnitQuaternion.from_axis_angle([tilt * math.cos(tilt_dir), tilt * math.sin(tilt_dir), 0.0])
            * down
        )
        cams.append((k, Pose(q, [x, y, z])))
    return cams


def simulate_aruco_detections(
    gt: ScenarioGroundTruth, cfg: ScenarioConfig, rng: np.random.Generator | None = None
) -> list[ArucoDetection]:
    """Marker pose measurements from every camera whose view cone holds the marker.

    Noise: Gaussian translation and axis-angle rotation perturbations, uniform
    gross outliers inside the view cone, Gaussian timestamp jitter. Emitted per
    keyframe so the pre-jitter timestamps always lie inside the trajectory span.
    """
    if rng is None:
        rng = _noise_rngs(cfg)[0]
    noise = cfg.noise
    cam_inv = [(cam_id, pose, pose.inverse()) for cam_id, pose in gt.camera_poses_world]
    cos_cone = math.cos(cfg.aruco_fov_half_angle)
    detections = []
    for tp in gt.robot_trajectory_metric:
        marker_world = tp.pose.compose(gt.offset)
        for cam_id, cam_pose, cam_pose_inv in cam_inv:
            p_cam = cam_pose_inv.transform_point(marker_world.translation)
            dist = float(np.linalg.norm(p_cam))
            if dist < 1e-9 or p_cam[2] <= 0.0 or p_cam[2] < cos_cone * dist:
                continue
            meas = cam_pose_inv.compose(marker_world)
            if noise.outlier_fraction > 0.0 and rng.uniform() < noise.outlier_fraction:
                theta = cfg.aruco_fov_half_angle * math.sqrt(rng.uniform())
                psi = rng.uniform(0.0, 2.0 * math.pi)
                r = rng.uniform(1.0, 4.0)
                pos = [
                    r * math.sin(theta) * math.cos(psi),
                    r * math.sin(theta) * math.sin(psi),
                    r * math.cos(theta),
                ]
                qw, qx, qy, qz = rng.normal(size=4)
                meas = Pose(UnitQuaternion(qw, qx, qy, qz), pos)
            else:
                t = meas.translation
                q = meas.rotation
                if noise.aruco_trans_sigma > 0.0:
                    t = t + rng.normal(0.0, noise.aruco_trans_sigma, 3)
                if noise.aruco_rot_sigma > 0.0:
                    q = UnitQuaternion.from_axis_angle(rng.normal(0.0, noise.aruco_rot_sigma, 3)) * q
                meas = Pose(q, t)
            stamp = tp.stamp
            if noise.timestamp_jitter_sigma > 0.0:
                stamp = max(0.0, stamp + rng.normal(0.0, noise.timestamp_jitter_sigma))
            detections.append(ArucoDetection(cam_id, stamp, meas))
    return detections


def simulate_blob_detections(
    gt: ScenarioGroundTruth,
    cfg: ScenarioConfig,
    intr: FisheyeIntrinsics,
    rng: np.random.Generator | None = None,
) -> list[BlobDetection]:
    """Pixel detections of every camera visible in the fisheye at each keyframe.

    Keeps the generating camera id as a hidden label for oracle checks only.
    """
    if rng is None:
        rng = _noise_rngs(cfg)[1]
    sigma = cfg.noise.blob_pixel_sigma
    blobs = []
    for tp in gt.robot_trajectory_metric:
        for cam_id, cam_pose in gt.camera_poses_world:
            uv = project_fisheye(intr, tp.pose, cam_pose.translation)
            if uv is None:
                continue
            u, v = uv
            if sigma > 0.0:
                u += rng.normal(0.0, sigma)
                v += rng.normal(0.0, sigma)
                u = min(max(u, 0.0), intr.width - 1.0)
                v = min(max(v, 0.0), intr.height - 1.0)
            blobs.append(BlobDetection(tp.keyframe_id, (u, v), camera_id=None, true_camera_id=cam_id))
    return blobs


def generate_scenario(
    cfg: ScenarioConfig, intrinsics: FisheyeIntrinsics | None = None
) -> tuple[ScenarioGroundTruth, Dataset]:
    """Build ground truth and the synthetic dataset the registration consumes."""
    cfg.validate()
    intr = intrinsics or default_fisheye_intrinsics()
    layout_rng = np.random.default_rng(cfg.seed)
    cameras = _camera_grid(cfg, layout_rng)
    metric = _sample_loop(cfg.trajectory, cfg.area)
    gt = ScenarioGroundTruth(cameras, metric, cfg.true_offset, cfg.true_scale)

    unscaled = Trajectory(
        TimedPose(tp.stamp, Pose(tp.pose.rotation, tp.pose.translation / cfg.true_scale), tp.keyframe_id)
        for tp in metric
    )
    rng_aruco, rng_blob = _noise_rngs(cfg)
    arucos = simulate_aruco_detections(gt, cfg, rng_aruco)
    blobs = simulate_blob_detections(gt, cfg, intr, rng_blob)
    dataset = Dataset(unscaled, arucos, blobs, intr)
    return gt, dataset
