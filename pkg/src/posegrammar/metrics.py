"""Evaluation: per-joint error, rigid alignment, and train/test splitting.

Three regimes are supported: raw root-relative error (p1), error after a
least-squares rigid alignment of each prediction to its ground truth (p2),
and p3, which is numerically p1 but applied to a camera-held-out split built
with :func:`make_cross_view_split`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .posenet import GrammarNet, predict_batch
from .skeleton import N_JOINTS, Pose2D, Pose3D, root_center_coords3d

PROTOCOLS = ("p1", "p2", "p3")


class DegenerateConfiguration(ValueError):
    """Point sets too collapsed for alignment (cross-covariance rank < 2)."""


class EmptySplit(ValueError):
    """No test poses to evaluate."""


class InvalidSplit(ValueError):
    """Requested camera/subject split is inconsistent."""


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint camera and subject sets for a cross-view experiment."""

    train_cameras: frozenset
    test_cameras: frozenset
    train_subjects: frozenset
    test_subjects: frozenset

    def __post_init__(self):
        object.__setattr__(self, "train_cameras", frozenset(self.train_cameras))
        object.__setattr__(self, "test_cameras", frozenset(self.test_cameras))
        object.__setattr__(self, "train_subjects", frozenset(self.train_subjects))
        object.__setattr__(self, "test_subjects", frozenset(self.test_subjects))
        if self.train_subjects & self.test_subjects:
            raise InvalidSplit("train and test subjects overlap")
        if self.train_cameras & self.test_cameras:
            raise InvalidSplit("train and test cameras overlap")


def make_cross_view_split(cameras, subjects, test_camera, test_subjects) -> SplitSpec:
    """Hold one camera and a set of subjects out of training entirely."""
    cameras = set(cameras)
    subjects = set(subjects)
    test_subjects = set(test_subjects)
    if test_camera not in cameras:
        raise InvalidSplit(f"test camera {test_camera!r} not among cameras")
    if not test_subjects or not test_subjects <= subjects:
        raise InvalidSplit("test subjects must be a non-empty subset of subjects")
    train_subjects = subjects - test_subjects
    if not train_subjects:
        raise InvalidSplit("no subjects left for training")
    return SplitSpec(
        train_cameras=frozenset(cameras - {test_camera}),
        test_cameras=frozenset({test_camera}),
        train_subjects=frozenset(train_subjects),
        test_subjects=frozenset(test_subjects),
    )


@dataclass(frozen=True)
class RigidTransform:
    """aligned = scale * (points @ rotation.T) + translation"""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (points @ self.rotation.T) + self.translation


def mpjpe(pred: Pose3D | np.ndarray, gt: Pose3D | np.ndarray) -> float:
    """Mean over joints of the Euclidean distance, in input units (mm)."""
    p = pred.coords if isinstance(pred, Pose3D) else np.asarray(pred, dtype=np.float64)
    g = gt.coords if isinstance(gt, Pose3D) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("pose shape mismatch")
    return float(np.linalg.norm(p - g, axis=-1).mean())


def rigid_align(
    pred: Pose3D | np.ndarray,
    gt: Pose3D | np.ndarray,
    allow_scale: bool = False,
) -> tuple[Pose3D, RigidTransform]:
    """Least-squares rotation+translation (optionally uniform scale) onto gt.

    The rotation is proper: the reflection case is excluded by flipping the
    sign of the smallest singular direction.
    """
    p = pred.coords if isinstance(pred, Pose3D) else np.asarray(pred, dtype=np.float64)
    g = gt.coords if isinstance(gt, Pose3D) else np.asarray(gt, dtype=np.float64)
    p_mean = p.mean(axis=0)
    g_mean = g.mean(axis=0)
    pc = p - p_mean
    gc = g - g_mean

    cross = pc.T @ gc
    u, s, vt = np.linalg.svd(cross)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise DegenerateConfiguration("cross-covariance rank below 2")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    rotation = vt.T @ flip @ u.T

    if allow_scale:
        var_p = (pc**2).sum()
        scale = float((s * np.diag(flip)).sum() / var_p)
    else:
        scale = 1.0
    translation = g_mean - scale * rotation @ p_mean
    transform = RigidTransform(rotation, translation, scale)
    return Pose3D(transform.apply(p)), transform


@dataclass(frozen=True, eq=False)
class EvalReport:
    """Aggregated errors: one row per tag group plus the overall mean."""

    protocol: str
    group_counts: dict[str, int]
    group_errors_mm: dict[str, float]
    per_joint_mm: np.ndarray
    count: int
    overall_mm: float

    def to_csv(self) -> str:
        lines = ["group,n,mpjpe_mm"]
        for group in sorted(self.group_counts):
            lines.append(
                f"{group},{self.group_counts[group]},{self.group_errors_mm[group]!r}"
            )
        lines.append(f"overall,{self.count},{self.overall_mm!r}")
        return "\n".join(lines) + "\n"

    def __str__(self):
        width = max(len(g) for g in [*self.group_counts, "overall"])
        rows = [f"{'group':<{width}}  {'n':>6}  mpjpe (mm)"]
        for group in sorted(self.group_counts):
            rows.append(
                f"{group:<{width}}  {self.group_counts[group]:>6}  "
                f"{self.group_errors_mm[group]:.3f}"
            )
        rows.append(f"{'overall':<{width}}  {self.count:>6}  {self.overall_mm:.3f}")
        return "\n".join(rows)


def evaluate_poses(
    preds: np.ndarray,
    gts: np.ndarray,
    tags: Sequence[str] | None,
    protocol: str = "p1",
    allow_scale: bool = False,
) -> EvalReport:
    """Aggregate per-joint errors of already-computed predictions.

    Both arrays are (N, 16, 3); they are root-centered before comparison.
    Protocol p2 rigidly aligns each prediction first.  Untagged poses land in
    the ``all`` group.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    preds = root_center_coords3d(np.asarray(preds, dtype=np.float64))
    gts = root_center_coords3d(np.asarray(gts, dtype=np.float64))
    if preds.shape != gts.shape or preds.ndim != 3:
        raise ValueError("predictions and ground truth must both be (N, 16, 3)")
    n = preds.shape[0]
    if n == 0:
        raise EmptySplit("no poses to evaluate")
    if tags is None:
        tags = [""] * n
    tags = [t if t else "all" for t in tags]
    if len(tags) != n:
        raise ValueError("one tag per pose required")

    if protocol == "p2":
        preds = np.stack(
            [rigid_align(preds[i], gts[i], allow_scale)[0].coords for i in range(n)]
        )

    joint_err = np.linalg.norm(preds - gts, axis=-1)  # (N, 16)
    per_pose = joint_err.mean(axis=1)
    group_counts: dict[str, int] = {}
    group_sums: dict[str, float] = {}
    for tag, err in zip(tags, per_pose):
        group_counts[tag] = group_counts.get(tag, 0) + 1
        group_sums[tag] = group_sums.get(tag, 0.0) + float(err)
    return EvalReport(
        protocol=protocol,
        group_counts=group_counts,
        group_errors_mm={t: group_sums[t] / group_counts[t] for t in group_counts},
        per_joint_mm=joint_err.mean(axis=0),
        count=n,
        overall_mm=float(per_pose.mean()),
    )


def evaluate(
    net: GrammarNet,
    test: Iterable[tuple[Pose2D, Pose3D, str]],
    protocol: str = "p1",
    allow_scale: bool = False,
) -> EvalReport:
    """Lift every test input with the network and score it against ground truth."""
    test = list(test)
    if not test:
        raise EmptySplit("no poses to evaluate")
    inputs = np.stack([u.coords for u, _, _ in test])
    gts = np.stack([v.coords for _, v, _ in test])
    tags = [tag for _, _, tag in test]
    preds = predict_batch(net, inputs)
    return evaluate_poses(preds, gts, tags, protocol, allow_scale)
