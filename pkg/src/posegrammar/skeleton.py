"""Joint vocabulary, pose containers and the body-structure chain catalog.

Everything downstream (cameras, the lifting network, metrics) works on the
fixed 16-joint skeleton defined here.  Joint order is frozen: flattened pose
vectors are always laid out ``x0 y0 x1 y1 ...`` (2D) or ``X0 Y0 Z0 ...`` (3D)
in :class:`JointId` index order.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import lru_cache

import numpy as np

N_JOINTS = 16


class JointId(IntEnum):
    """The 16 joints, with stable indices used by every array layout."""

    HIP = 0
    SPINE = 1
    THORAX = 2
    HEAD = 3
    L_SHOULDER = 4
    L_ELBOW = 5
    L_WRIST = 6
    R_SHOULDER = 7
    R_ELBOW = 8
    R_WRIST = 9
    L_HIP = 10
    L_KNEE = 11
    L_FOOT = 12
    R_HIP = 13
    R_KNEE = 14
    R_FOOT = 15


class DegeneratePose(ValueError):
    """Raised when a pose has no usable spatial extent (all joints coincide)."""


def _frozen_coords(coords, shape) -> np.ndarray:
    arr = np.array(coords, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"expected coords of shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("pose coordinates must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Pose2D:
    """A 2D pose: 16 x 2 pixel coordinates in JointId order."""

    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen_coords(self.coords, (N_JOINTS, 2)))

    @classmethod
    def from_flat(cls, flat) -> "Pose2D":
        return cls(np.asarray(flat, dtype=np.float64).reshape(N_JOINTS, 2))

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1).copy()

    def __getitem__(self, joint: JointId) -> np.ndarray:
        return self.coords[int(joint)]


@dataclass(frozen=True, eq=False)
class Pose3D:
    """A 3D pose: 16 x 3 millimeter coordinates in JointId order.

    Whether the coordinates are world-frame, camera-frame or root-relative is
    a caller-side convention; the container does not tag it.
    """

    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen_coords(self.coords, (N_JOINTS, 3)))

    @classmethod
    def from_flat(cls, flat) -> "Pose3D":
        return cls(np.asarray(flat, dtype=np.float64).reshape(N_JOINTS, 3))

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1).copy()

    def __getitem__(self, joint: JointId) -> np.ndarray:
        return self.coords[int(joint)]


class ChainKind(Enum):
    KINEMATIC = "kinematic"
    SYMMETRY = "symmetry"
    COORDINATION = "coordination"


@dataclass(frozen=True)
class GrammarChain:
    """One chain of the body-structure catalog.

    Kinematic chains list their joints in order.  Symmetry and coordination
    chains pair two kinematic chains of equal length; their ``joints`` tuple
    is empty and ``members`` holds the pair.
    """

    kind: ChainKind
    name: str
    joints: tuple[JointId, ...] = ()
    members: tuple["GrammarChain", "GrammarChain"] | None = None

    @property
    def steps(self) -> int:
        """Number of recurrence steps a network node over this chain runs."""
        if self.kind is ChainKind.KINEMATIC:
            return len(self.joints)
        return len(self.members[0].joints)

    @property
    def joints_per_step(self) -> int:
        return 1 if self.kind is ChainKind.KINEMATIC else 2

    def step_joints(self, t: int) -> tuple[JointId, ...]:
        """Joints predicted at step ``t`` (0-based)."""
        if self.kind is ChainKind.KINEMATIC:
            return (self.joints[t],)
        return (self.members[0].joints[t], self.members[1].joints[t])


@lru_cache(maxsize=1)
def grammar_catalog() -> tuple[GrammarChain, ...]:
    """The nine chains, in fixed order: 5 kinematic, 2 symmetry, 2 coordination."""
    J = JointId
    spine = GrammarChain(ChainKind.KINEMATIC, "spine", (J.HEAD, J.THORAX, J.SPINE, J.HIP))
    l_arm = GrammarChain(ChainKind.KINEMATIC, "l.arm", (J.L_SHOULDER, J.L_ELBOW, J.L_WRIST))
    r_arm = GrammarChain(ChainKind.KINEMATIC, "r.arm", (J.R_SHOULDER, J.R_ELBOW, J.R_WRIST))
    l_leg = GrammarChain(ChainKind.KINEMATIC, "l.leg", (J.L_HIP, J.L_KNEE, J.L_FOOT))
    r_leg = GrammarChain(ChainKind.KINEMATIC, "r.leg", (J.R_HIP, J.R_KNEE, J.R_FOOT))
    return (
        spine,
        l_arm,
        r_arm,
        l_leg,
        r_leg,
        GrammarChain(ChainKind.SYMMETRY, "sym.arm", members=(l_arm, r_arm)),
        GrammarChain(ChainKind.SYMMETRY, "sym.leg", members=(l_leg, r_leg)),
        GrammarChain(ChainKind.COORDINATION, "crd.l2r", members=(l_arm, r_leg)),
        GrammarChain(ChainKind.COORDINATION, "crd.r2l", members=(r_arm, l_leg)),
    )


def normalize_coords2d(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized zero-mean / unit-RMS conditioning of 2D coordinates.

    ``coords`` is (..., 16, 2); returns (normalized, offset (..., 2),
    scale (...,)).  Raises :class:`DegeneratePose` when any pose's RMS joint
    distance from its centroid underflows.
    """
    coords = np.asarray(coords, dtype=np.float64)
    offset = coords.mean(axis=-2)
    centered = coords - offset[..., None, :]
    scale = np.sqrt((centered**2).sum(axis=-1).mean(axis=-1))
    if np.any(scale < 1e-12):
        raise DegeneratePose("all joints coincide; normalization scale is zero")
    normalized = centered / scale[..., None, None]
    return normalized, offset, scale


def normalize_pose2d(p: Pose2D) -> tuple[Pose2D, np.ndarray, float]:
    """Condition a pose to zero mean and unit RMS joint distance.

    Returns the normalized pose plus the (offset, scale) needed to invert.
    """
    normalized, offset, scale = normalize_coords2d(p.coords)
    return Pose2D(normalized), offset, float(scale)


def denormalize_pose2d(p: Pose2D, offset: np.ndarray, scale: float) -> Pose2D:
    """Invert :func:`normalize_pose2d`."""
    return Pose2D(p.coords * scale + np.asarray(offset, dtype=np.float64))


def root_center_coords3d(coords: np.ndarray) -> np.ndarray:
    """Translate (..., 16, 3) coordinates so the hip joint sits at the origin."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords - coords[..., JointId.HIP : JointId.HIP + 1, :]


def root_center_pose3d(p: Pose3D) -> Pose3D:
    """Translate a pose so the hip joint sits at the origin."""
    return Pose3D(root_center_coords3d(p.coords))


def joint_fan_in() -> dict[JointId, int]:
    """How many chains of the catalog predict each joint.

    Spine-chain joints are predicted once; every limb joint is predicted by
    its kinematic chain plus one symmetry and one coordination chain.
    """
    counts: dict[JointId, int] = {j: 0 for j in JointId}
    for chain in grammar_catalog():
        for t in range(chain.steps):
            for j in chain.step_joints(t):
                counts[j] += 1
    return counts
