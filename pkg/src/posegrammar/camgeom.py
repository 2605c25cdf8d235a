"""Pinhole camera model, pose projection and the virtual camera rig.

The projection convention used throughout: a world point ``X`` maps to camera
coordinates ``R @ (X + T)`` and then through the intrinsic matrix ``K``; the
pixel is the perspective division of ``K @ R @ (X + T)``.  In this convention
the camera center sits at ``-T`` in the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .skeleton import Pose2D, Pose3D

SECTOR_COUNT = 12
SECTOR_WIDTH = 2.0 * math.pi / SECTOR_COUNT
MIN_DEPTH = 1e-9

DEFAULT_RIG_RADIUS_MM = 5000.0
DEFAULT_RIG_HEIGHT_MM = 1500.0


class BehindCamera(ValueError):
    """A joint's projective depth is non-positive (joint behind the camera)."""

    def __init__(self, joint: int, pose_index: int | None = None):
        self.joint = int(joint)
        self.pose_index = pose_index
        where = f"joint {self.joint}"
        if pose_index is not None:
            where = f"pose {pose_index}, {where}"
        super().__init__(f"{where} projects behind the camera (depth <= {MIN_DEPTH})")


class DegenerateGeometry(ValueError):
    """Look-at construction failed (coincident points or parallel up/view)."""


class RigConflict(ValueError):
    """Sector exclusions leave no room for any virtual camera."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal lengths and principal point, all in pixels."""

    alpha_x: float
    alpha_y: float
    x0: float
    y0: float

    def __post_init__(self):
        if not (self.alpha_x > 0 and self.alpha_y > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.alpha_x, 0.0, self.x0],
                [0.0, self.alpha_y, self.y0],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """Rotation ``R`` (world -> camera axes) and translation ``T`` in mm."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("extrinsics need a 3x3 rotation and a 3-vector translation")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.t


@dataclass(frozen=True, eq=False)
class CameraParams:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics


def project_coords(coords: np.ndarray, cam: CameraParams) -> tuple[np.ndarray, np.ndarray]:
    """Project (..., 3) world points; returns (pixels (..., 2), depths (...,)).

    Raises :class:`BehindCamera` naming the first offending (pose, joint) when
    any depth is below the positivity floor; for inputs of shape (P, 16, 3)
    the pose index is reported, for (16, 3) only the joint.
    """
    coords = np.asarray(coords, dtype=np.float64)
    cam_pts = (coords + cam.extrinsics.t) @ cam.extrinsics.r.T
    hom = cam_pts @ cam.intrinsics.matrix().T
    depths = hom[..., 2]
    if np.any(depths <= MIN_DEPTH):
        flat_bad = int(np.argmax(depths <= MIN_DEPTH))
        idx = np.unravel_index(flat_bad, depths.shape)
        joint = idx[-1]
        pose_index = idx[0] if depths.ndim >= 2 else None
        raise BehindCamera(joint, pose_index)
    pixels = hom[..., :2] / depths[..., None]
    return pixels, depths


def project(v: Pose3D, cam: CameraParams) -> tuple[Pose2D, np.ndarray]:
    """Project one pose; returns the 2D pose and the 16 projective depths."""
    pixels, depths = project_coords(v.coords, cam)
    return Pose2D(pixels), depths


def camera_frame_coords(coords: np.ndarray, cam: CameraParams) -> np.ndarray:
    """Map (..., 3) world points into the camera reference frame."""
    coords = np.asarray(coords, dtype=np.float64)
    return (coords + cam.extrinsics.t) @ cam.extrinsics.r.T


def look_at_extrinsics(camera_pos, target, up=(0.0, 0.0, 1.0)) -> CameraExtrinsics:
    """Extrinsics for a camera at ``camera_pos`` whose optical axis hits ``target``.

    The returned rotation is proper and orthonormal; the target projects to the
    principal point by construction.
    """
    camera_pos = np.asarray(camera_pos, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)

    forward = target - camera_pos
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise DegenerateGeometry("camera position coincides with the target")
    z_axis = forward / dist
    x_axis = np.cross(up, z_axis)
    nx = np.linalg.norm(x_axis)
    if nx < 1e-12:
        raise DegenerateGeometry("up direction is parallel to the view direction")
    x_axis = x_axis / nx
    y_axis = np.cross(z_axis, x_axis)
    r = np.vstack([x_axis, y_axis, z_axis])
    return CameraExtrinsics(r=r, t=-camera_pos)


@dataclass(frozen=True, eq=False)
class VirtualRig:
    """Circular camera arrangement around a subject, split into 12 sectors."""

    subject_center: np.ndarray
    radius: float = DEFAULT_RIG_RADIUS_MM
    height: float = DEFAULT_RIG_HEIGHT_MM
    real_azimuths: tuple[float, ...] = ()
    virtual_azimuths: tuple[float, ...] = ()

    def __post_init__(self):
        center = np.array(self.subject_center, dtype=np.float64)
        if center.shape != (3,):
            raise ValueError("subject_center must be a 3-vector")
        center.flags.writeable = False
        object.__setattr__(self, "subject_center", center)
        if self.radius <= 0 or self.height < 0:
            raise ValueError("rig radius must be positive and height non-negative")
        object.__setattr__(
            self, "real_azimuths", tuple(wrap_azimuth(a) for a in self.real_azimuths)
        )
        object.__setattr__(
            self, "virtual_azimuths", tuple(wrap_azimuth(a) for a in self.virtual_azimuths)
        )


def wrap_azimuth(azimuth: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    a = math.fmod(float(azimuth), 2.0 * math.pi)
    if a < 0:
        a += 2.0 * math.pi
    return 0.0 if a >= 2.0 * math.pi else a


def sector_of(azimuth: float) -> int:
    """Sector index of an azimuth; boundary angles go to the lower-index sector."""
    a = wrap_azimuth(azimuth)
    ratio = a / SECTOR_WIDTH
    nearest = round(ratio)
    if abs(ratio - nearest) < 1e-9:
        # exactly on a boundary
        return 0 if nearest == 0 else (nearest - 1) % SECTOR_COUNT
    return int(ratio) % SECTOR_COUNT


def sector_center(sector: int) -> float:
    return (sector + 0.5) * SECTOR_WIDTH


def circular_distance(a: float, b: float) -> float:
    d = abs(wrap_azimuth(a) - wrap_azimuth(b))
    return min(d, 2.0 * math.pi - d)


def plan_virtual_azimuths(rig: VirtualRig, test_azimuth: float) -> tuple[float, ...]:
    """Sector-center azimuths to simulate cameras at.

    Sectors holding real cameras are excluded, as are the two free sectors
    whose centers lie closest to the test camera's azimuth (ties broken toward
    the smaller azimuth).
    """
    if len(rig.real_azimuths) > 4:
        raise ValueError("rig supports at most 4 real cameras")
    occupied = {sector_of(a) for a in rig.real_azimuths}
    free = [s for s in range(SECTOR_COUNT) if s not in occupied]
    by_closeness = sorted(
        free, key=lambda s: (circular_distance(sector_center(s), test_azimuth), sector_center(s))
    )
    protected = set(by_closeness[:2])
    usable = [s for s in free if s not in protected]
    if not usable:
        raise RigConflict("occupied and protected sectors leave no room for virtual cameras")
    return tuple(sector_center(s) for s in usable)


def make_virtual_cameras(
    rig: VirtualRig,
    template_intrinsics: CameraIntrinsics,
    test_azimuth: float,
) -> list[CameraParams]:
    """One camera per usable sector, on the rig circle, aimed at the subject.

    Each camera copies ``template_intrinsics`` and is positioned at the sector
    center azimuth, ``rig.radius`` out and ``rig.height`` up from the subject
    center, looking at the subject center.
    """
    cameras = []
    for azimuth in plan_virtual_azimuths(rig, test_azimuth):
        pos = rig.subject_center + np.array(
            [
                rig.radius * math.cos(azimuth),
                rig.radius * math.sin(azimuth),
                rig.height,
            ]
        )
        ext = look_at_extrinsics(pos, rig.subject_center)
        cameras.append(CameraParams(template_intrinsics, ext))
    return cameras


def camera_azimuth(cam: CameraParams, subject_center) -> float:
    """Azimuth of a camera's center as seen from the subject center."""
    center = cam.extrinsics.center - np.asarray(subject_center, dtype=np.float64)
    return wrap_azimuth(math.atan2(center[1], center[0]))
