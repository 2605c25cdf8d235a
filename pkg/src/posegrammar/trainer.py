"""Two-stage training over 2D-3D pose pairs, with optional per-epoch resampling.

Stage 1 fits the base network to root-relative 3D targets; stage 2 continues
end to end through the chain nodes (or, for the node-free variant, keeps
training the base) at a small constant rate.  When a residual noise model is
attached, every epoch redraws each pair's 2D input from it, so the network
never sees the same corrupted inputs twice while staying fully reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .camgeom import (
    CameraIntrinsics,
    CameraParams,
    VirtualRig,
    camera_frame_coords,
    make_virtual_cameras,
    project_coords,
)
from .mixture import ResidualMixture, sample_detections
from .posenet import (
    ALL_NODE_NAMES,
    BaseNetConfig,
    GrammarNet,
    base_forward,
    build_grammar_net,
    forward_for_variant,
)
from .skeleton import JointId, N_JOINTS, Pose3D, normalize_coords2d


class NonFiniteLoss(ArithmeticError):
    """Training hit a non-finite loss; carries stage, epoch and batch index."""

    def __init__(self, stage: int, epoch: int, batch_index: int):
        self.stage = stage
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(
            f"non-finite loss in stage {stage}, epoch {epoch}, batch {batch_index}"
        )


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Paired 2D inputs (raw pixels) and root-relative 3D targets (mm)."""

    inputs_2d: np.ndarray  # (N, 16, 2)
    targets_3d: np.ndarray  # (N, 16, 3), root-centered, camera frame
    tags: tuple[str, ...]

    def __post_init__(self):
        u = np.array(self.inputs_2d, dtype=np.float64)
        v = np.array(self.targets_3d, dtype=np.float64)
        if u.ndim != 3 or u.shape[1:] != (N_JOINTS, 2):
            raise ValueError(f"inputs_2d must be (N, {N_JOINTS}, 2), got {u.shape}")
        if v.shape != (u.shape[0], N_JOINTS, 3):
            raise ValueError(f"targets_3d must match inputs, got {v.shape}")
        if u.shape[0] == 0:
            raise ValueError("training set is empty")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("training pairs must be finite")
        tags = tuple(self.tags)
        if len(tags) != u.shape[0]:
            raise ValueError("one tag per pair required")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "inputs_2d", u)
        object.__setattr__(self, "targets_3d", v)
        object.__setattr__(self, "tags", tags)

    def __len__(self) -> int:
        return self.inputs_2d.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule plus network-construction knobs.

    ``augmentation`` is a residual mixture (the learned model, or the
    white-noise baseline) or None for clean inputs.  All randomness descends
    from ``seed``.
    """

    stage1_epochs: int = 200
    stage1_lr: float = 1e-3
    lr_decay: float = 0.96
    stage2_epochs: int = 200
    stage2_lr: float = 1e-5
    batch_size: int = 64
    seed: int = 0
    augmentation: "ResidualMixture | None" = None
    augment_virtual_only: bool = False
    base: BaseNetConfig = field(default_factory=BaseNetConfig)
    state_dim: int = 128
    active_nodes: tuple[str, ...] = ALL_NODE_NAMES

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.stage1_lr < 0 or self.stage2_lr < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("bad learning-rate settings")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")


@dataclass(frozen=True)
class HistoryRow:
    stage: int
    epoch: int
    loss: float


def build_augmented_set(
    poses: Sequence[Pose3D],
    real_cameras: Sequence[CameraParams],
    rig: VirtualRig | None = None,
    template_intrinsics: CameraIntrinsics | None = None,
    test_azimuth: float | None = None,
) -> TrainingSet:
    """Project every pose through every real and virtual camera.

    Ground-truth 2D comes straight from the projection; the 3D target is the
    pose in that camera's frame, root-centered.  Pairs are tagged ``real<i>``
    or ``virt<i>`` by camera.  With no rig, only real-camera pairs are built.
    """
    if not poses:
        raise ValueError("no poses given")
    if not real_cameras and rig is None:
        raise ValueError("need at least one camera source")
    world = np.stack([p.coords for p in poses])

    cams: list[tuple[str, CameraParams]] = [
        (f"real{i}", cam) for i, cam in enumerate(real_cameras)
    ]
    if rig is not None:
        if template_intrinsics is None:
            if not real_cameras:
                raise ValueError("virtual cameras need template intrinsics")
            template_intrinsics = real_cameras[0].intrinsics
        if test_azimuth is None:
            raise ValueError("virtual cameras need the test azimuth")
        for i, cam in enumerate(make_virtual_cameras(rig, template_intrinsics, test_azimuth)):
            cams.append((f"virt{i}", cam))

    inputs, targets, tags = [], [], []
    for tag, cam in cams:
        pixels, _ = project_coords(world, cam)
        cam_pts = camera_frame_coords(world, cam)
        cam_pts = cam_pts - cam_pts[:, JointId.HIP : JointId.HIP + 1, :]
        inputs.append(pixels)
        targets.append(cam_pts)
        tags.extend([tag] * world.shape[0])
    return TrainingSet(np.concatenate(inputs), np.concatenate(targets), tuple(tags))


def epoch_inputs(
    ts: TrainingSet,
    augmentation: ResidualMixture | None,
    global_seed: int,
    epoch: int,
    virtual_only: bool = False,
) -> np.ndarray:
    """The (N, 16, 2) raw 2D inputs used in one epoch.

    Without augmentation this is the stored ground truth, bit-identical every
    epoch.  With a noise model, pair ``i`` is redrawn with the seed tuple
    (global_seed, epoch, i); ``virtual_only`` leaves real-camera pairs clean.
    """
    if augmentation is None:
        return ts.inputs_2d
    drawn = sample_detections(ts.inputs_2d, augmentation, global_seed, epoch)
    if virtual_only:
        real = np.array([tag.startswith("real") for tag in ts.tags])
        drawn[real] = ts.inputs_2d[real]
    return drawn


def _run_stage(
    net: GrammarNet,
    ts: TrainingSet,
    cfg: TrainConfig,
    stage: int,
    epoch_offset: int,
    history: list[HistoryRow],
) -> None:
    n = len(ts)
    targets_flat = ts.targets_3d.reshape(n, 3 * N_JOINTS)
    epochs = cfg.stage1_epochs if stage == 1 else cfg.stage2_epochs
    state = tc.AdamState()
    stage1 = stage == 1

    for epoch in range(epochs):
        abs_epoch = epoch_offset + epoch
        lr = cfg.stage1_lr * cfg.lr_decay**epoch if stage1 else cfg.stage2_lr
        raw = epoch_inputs(ts, cfg.augmentation, cfg.seed, abs_epoch, cfg.augment_virtual_only)
        normalized, _, _ = normalize_coords2d(raw)
        x_all = normalized.reshape(n, 2 * N_JOINTS)

        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 0x5F, stage, epoch))
        )
        perm = shuffle_rng.permutation(n)
        total = 0.0
        used = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            if idx.shape[0] < 2:
                continue  # batch statistics need two rows
            drop_rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, 0xD0, stage, epoch, b))
            )
            tape = tc.Tape()
            x = tc.Tensor(x_all[idx])
            try:
                if stage1:
                    pred, _ = base_forward(net, x, "train", tape, drop_rng)
                else:
                    pred = forward_for_variant(net, x, "train", tape, drop_rng)
                loss = tc.euclidean_loss(tape, pred, targets_flat[idx])
            except FloatingPointError as exc:
                raise NonFiniteLoss(stage, epoch, b) from exc
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NonFiniteLoss(stage, epoch, b)
            tape.backward(loss)
            tc.adam_step(net.registry, state, lr)
            net.registry.zero_grad()
            total += loss_val * idx.shape[0]
            used += idx.shape[0]
        if used == 0:
            raise ValueError("training set too small to form a single 2-sample batch")
        history.append(HistoryRow(stage, epoch, total / used))


def train(
    ts: TrainingSet,
    cfg: TrainConfig,
    net: GrammarNet | None = None,
) -> tuple[GrammarNet, list[HistoryRow]]:
    """Run both stages; returns the trained network and the per-epoch loss trace.

    A fresh network is built from the config unless one is passed in.  The
    run is a pure function of (training set, config): reruns produce
    bit-identical histories and parameters.
    """
    if net is None:
        net = build_grammar_net(cfg.base, cfg.state_dim, cfg.seed, cfg.active_nodes)
    history: list[HistoryRow] = []
    _run_stage(net, ts, cfg, stage=1, epoch_offset=0, history=history)
    _run_stage(net, ts, cfg, stage=2, epoch_offset=cfg.stage1_epochs, history=history)
    return net, history


def history_to_csv(history: Sequence[HistoryRow]) -> str:
    lines = ["stage,epoch,loss"]
    lines += [f"{row.stage},{row.epoch},{row.loss!r}" for row in history]
    return "\n".join(lines) + "\n"
