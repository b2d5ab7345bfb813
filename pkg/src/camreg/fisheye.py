"""Equidistant fisheye projection with odd-polynomial radial distortion.

The image radius grows with the angle theta from the optical axis:
r(theta) = f * (theta + k1 theta^3 + k2 theta^5 + k3 theta^7 + k4 theta^9).
Points outside the field-of-view cone project to the NotVisible outcome
(returned as None), which downstream code consumes as a 0/1 visibility weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .geometry import Pose

__all__ = ["FisheyeIntrinsics", "project_fisheye", "project_camera_point"]


@dataclass(frozen=True)
class FisheyeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    width: int = 1920
    height: int = 1080
    max_fov: float = math.pi  # full cone aperture, radians

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not 0.0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0.0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        if not 0.0 < self.max_fov <= math.pi:
            raise ValueError(f"max_fov={self.max_fov} outside (0, pi]")


def project_camera_point(intr: FisheyeIntrinsics, p_cam: Sequence[float]) -> Optional[tuple[float, float]]:
    """Project a camera-frame point (optical axis = +z). None when not visible."""
    x, y, z = float(p_cam[0]), float(p_cam[1]), float(p_cam[2])
    rxy = math.hypot(x, y)
    if rxy < 1e-12 and abs(z) < 1e-12:
        return None  # at the optical center: direction undefined
    theta = math.atan2(rxy, z)
    if theta > 0.5 * intr.max_fov:
        return None
    t2 = theta * theta
    d = theta * (1.0 + t2 * (intr.k1 + t2 * (intr.k2 + t2 * (intr.k3 + t2 * intr.k4))))
    if rxy < 1e-12:
        return (intr.cx, intr.cy)
    return (intr.cx + intr.fx * d * (x / rxy), intr.cy + intr.fy * d * (y / rxy))


def project_fisheye(
    intr: FisheyeIntrinsics, cam_pose_in_world: Pose, point_world: Sequence[float]
) -> Optional[tuple[float, float]]:
    """Project a world point into the fisheye image of a camera posed in the world.

    Returns pixel (u, v), or None (NotVisible) when the point lies outside the
    field-of-view cone or at the optical center.
    """
    return project_camera_point(intr, cam_pose_in_world.inverse_transform_point(point_world))
