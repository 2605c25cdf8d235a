"""The lifting network: cascaded base blocks plus nine chain-recurrent nodes.

The base network maps a normalized 32-entry 2D pose to an initial 48-entry 3D
estimate and a combined feature carrying both the 2D input encoding and the
re-projected 3D estimate.  On top, one bidirectional recurrent node per
catalog chain re-estimates its joints step by step; the final pose is the
per-joint arithmetic mean over every node that predicts that joint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .skeleton import (
    ChainKind,
    GrammarChain,
    JointId,
    N_JOINTS,
    Pose2D,
    Pose3D,
    grammar_catalog,
    normalize_coords2d,
    root_center_coords3d,
)

ALL_NODE_NAMES = ("kin.spine", "kin.l.arm", "kin.r.arm", "kin.l.leg", "kin.r.leg",
                  "sym.arm", "sym.leg", "crd.l2r", "crd.r2l")
KINEMATIC_NODE_NAMES = ALL_NODE_NAMES[:5]
SYMMETRY_NODE_NAMES = ALL_NODE_NAMES[5:7]
COORDINATION_NODE_NAMES = ALL_NODE_NAMES[7:9]


class StepMismatch(ValueError):
    """Recurrent node fed a step count different from its chain length."""


@dataclass(frozen=True)
class BaseNetConfig:
    """Width/depth knobs of the base network."""

    hidden_dim: int = 1024
    layers_per_block: int = 2
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.hidden_dim < 48:
            raise ValueError("hidden_dim must be >= 48")
        if self.layers_per_block < 1:
            raise ValueError("layers_per_block must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class BrnnNode:
    """One bidirectional recurrent node bound to a catalog chain.

    Parameters follow the usual two-stream layout: forward/backward state
    maps ``wfh, wbh``, input maps ``wfa, wba``, state biases ``bfh, bbh``,
    and the per-step output head ``wfy, wby, by``.  The output activation is
    the identity.
    """

    name: str
    chain: GrammarChain
    state_dim: int
    wfh: tc.Tensor
    wfa: tc.Tensor
    bfh: tc.Tensor
    wbh: tc.Tensor
    wba: tc.Tensor
    bbh: tc.Tensor
    wfy: tc.Tensor
    wby: tc.Tensor
    by: tc.Tensor

    @property
    def steps(self) -> int:
        return self.chain.steps

    @property
    def out_dim(self) -> int:
        return 3 * self.chain.joints_per_step


@dataclass(eq=False)
class GrammarNet:
    """Parameter container for the base network plus the nine chain nodes."""

    config: BaseNetConfig
    state_dim: int
    registry: tc.Registry
    nodes: dict[str, BrnnNode]
    active_nodes: tuple[str, ...] = field(default=ALL_NODE_NAMES)

    def node_list(self, kind: ChainKind) -> list[BrnnNode]:
        return [n for n in self.nodes.values() if n.chain.kind is kind]


def _validate_active(active: Sequence[str]) -> tuple[str, ...]:
    active = tuple(active)
    unknown = set(active) - set(ALL_NODE_NAMES)
    if unknown:
        raise ValueError(f"unknown node names: {sorted(unknown)}")
    kin_chains = {n.removeprefix("kin.") for n in active if n.startswith("kin.")}
    for top in set(active) - set(KINEMATIC_NODE_NAMES):
        chain = next(c for c in grammar_catalog() if c.name == top)
        for member in chain.members:
            if member.name not in kin_chains:
                raise ValueError(f"node {top!r} needs kinematic node for {member.name!r}")
    return tuple(n for n in ALL_NODE_NAMES if n in active)


def build_grammar_net(
    config: BaseNetConfig = BaseNetConfig(),
    state_dim: int = 128,
    seed: int = 0,
    active_nodes: Sequence[str] = ALL_NODE_NAMES,
) -> GrammarNet:
    """Construct and initialize every parameter of the network.

    Weights draw from a fan-in-scaled uniform distribution, biases start at
    zero; initialization order is fixed so a seed pins every value.
    """
    active = _validate_active(active_nodes)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x1A17)))
    reg = tc.Registry()

    def weight(name, fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return reg.register(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def bias(name, dim):
        return reg.register(name, np.zeros(dim))

    h = config.hidden_dim
    weight("base.in.w", 2 * N_JOINTS, h)
    bias("base.in.b", h)
    for blk in (1, 2):
        for lay in range(config.layers_per_block):
            p = f"base.b{blk}.l{lay}"
            weight(f"{p}.w", h, h)
            bias(f"{p}.b", h)
            reg.register(f"{p}.bn.gamma", np.ones(h))
            reg.register(f"{p}.bn.beta", np.zeros(h))
            reg.register(f"{p}.bn.rmean", np.zeros(h), trainable=False)
            reg.register(f"{p}.bn.rvar", np.ones(h), trainable=False)
    weight("base.out1.w", h, 3 * N_JOINTS)
    bias("base.out1.b", 3 * N_JOINTS)
    weight("base.reproj1.w", 3 * N_JOINTS, h)
    bias("base.reproj1.b", h)
    weight("base.out2.w", h, 3 * N_JOINTS)
    bias("base.out2.b", 3 * N_JOINTS)
    weight("base.reproj2.w", 3 * N_JOINTS, h)
    bias("base.reproj2.b", h)

    nodes: dict[str, BrnnNode] = {}
    for chain in grammar_catalog():
        name = chain.name if chain.kind is not ChainKind.KINEMATIC else f"kin.{chain.name}"
        in_dim = 2 * h if chain.kind is ChainKind.KINEMATIC else 6
        out_dim = 3 * chain.joints_per_step
        p = name
        nodes[name] = BrnnNode(
            name=name,
            chain=chain,
            state_dim=state_dim,
            wfh=weight(f"{p}.wfh", state_dim, state_dim),
            wfa=weight(f"{p}.wfa", in_dim, state_dim),
            bfh=bias(f"{p}.bfh", state_dim),
            wbh=weight(f"{p}.wbh", state_dim, state_dim),
            wba=weight(f"{p}.wba", in_dim, state_dim),
            bbh=bias(f"{p}.bbh", state_dim),
            wfy=weight(f"{p}.wfy", state_dim, out_dim),
            wby=weight(f"{p}.wby", state_dim, out_dim),
            by=bias(f"{p}.by", out_dim),
        )
    return GrammarNet(config, state_dim, reg, nodes, active)


def _block(net: GrammarNet, x: tc.Tensor, blk: int, mode: str, tape, rng) -> tc.Tensor:
    reg = net.registry
    out = x
    for lay in range(net.config.layers_per_block):
        p = f"base.b{blk}.l{lay}"
        out = tc.affine(tape, out, reg[f"{p}.w"], reg[f"{p}.b"])
        out = tc.batch_norm(
            tape, out, reg[f"{p}.bn.gamma"], reg[f"{p}.bn.beta"],
            reg[f"{p}.bn.rmean"], reg[f"{p}.bn.rvar"], mode,
        )
        out = tc.relu(tape, out)
        out = tc.dropout(tape, out, net.config.dropout_rate, mode, rng)
    return tc.add(tape, out, x)  # residual around the block


def base_forward(
    net: GrammarNet,
    x: tc.Tensor,
    mode: str,
    tape: tc.Tape | None = None,
    drop_rng: np.random.Generator | None = None,
) -> tuple[tc.Tensor, tc.Tensor]:
    """Base-network pass over normalized (batch, 32) inputs.

    Returns the (batch, 48) estimate and the (batch, 2*hidden) combined
    feature: the re-projected estimate concatenated with the input encoding.
    """
    if mode == "train" and drop_rng is None and net.config.dropout_rate > 0:
        raise ValueError("train mode with dropout needs an rng")
    reg = net.registry
    feat2d = tc.affine(tape, x, reg["base.in.w"], reg["base.in.b"])
    b1 = _block(net, feat2d, 1, mode, tape, drop_rng)
    v1 = tc.affine(tape, b1, reg["base.out1.w"], reg["base.out1.b"])
    r1 = tc.affine(tape, v1, reg["base.reproj1.w"], reg["base.reproj1.b"])
    b2 = _block(net, r1, 2, mode, tape, drop_rng)
    v0 = tc.affine(tape, b2, reg["base.out2.w"], reg["base.out2.b"])
    r2 = tc.affine(tape, v0, reg["base.reproj2.w"], reg["base.reproj2.b"])
    combined = tc.concat(tape, [r2, feat2d])
    return v0, combined


def brnn_forward(
    tape: tc.Tape | None,
    node: BrnnNode,
    step_inputs: Sequence[tc.Tensor],
) -> list[tc.Tensor]:
    """Run one node over its chain; returns a per-step list of output tensors.

    Forward states sweep left-to-right, backward states right-to-left, both
    from zero boundary states; each step's output combines the two streams
    through the identity-activated head.  The whole sweep is recorded as a
    single fused tape entry with a hand-derived backward pass.
    """
    steps = len(step_inputs)
    if steps != node.steps:
        raise StepMismatch(f"{node.name}: got {steps} step inputs, chain has {node.steps}")
    batch = step_inputs[0].data.shape[0]
    for t in step_inputs:
        if t.data.shape != (batch, node.wfa.data.shape[0]):
            raise tc.ShapeMismatch(f"{node.name}: bad step-input shape {t.data.shape}")

    wfh, wfa, bfh = node.wfh.data, node.wfa.data, node.bfh.data
    wbh, wba, bbh = node.wbh.data, node.wba.data, node.bbh.data
    wfy, wby, by = node.wfy.data, node.wby.data, node.by.data

    # hf[t + 1] is the forward state at step t, hf[0] the zero boundary;
    # hb[t] is the backward state at step t, hb[steps] the zero boundary.
    hf = [np.zeros((batch, node.state_dim))]
    for t in range(steps):
        hf.append(np.tanh(hf[t] @ wfh + step_inputs[t].data @ wfa + bfh))
    hb: list[np.ndarray] = [None] * (steps + 1)  # type: ignore[list-item]
    hb[steps] = np.zeros((batch, node.state_dim))
    for t in range(steps - 1, -1, -1):
        hb[t] = np.tanh(hb[t + 1] @ wbh + step_inputs[t].data @ wba + bbh)

    outputs = []
    for t in range(steps):
        y = hf[t + 1] @ wfy + hb[t] @ wby + by
        outputs.append(tc.Tensor(tc._checked(y)))

    if tape is not None:

        def backward():
            grads = [tc._grad_of(y) for y in outputs]
            d_wfy = np.zeros_like(wfy)
            d_wby = np.zeros_like(wby)
            d_by = np.zeros_like(by)
            for t in range(steps):
                d_wfy += hf[t + 1].T @ grads[t]
                d_wby += hb[t].T @ grads[t]
                d_by += grads[t].sum(axis=0)
            tc._accumulate(node.wfy, d_wfy)
            tc._accumulate(node.wby, d_wby)
            tc._accumulate(node.by, d_by)

            # forward stream: state at step t feeds step t+1, so sweep back
            d_wfh = np.zeros_like(wfh)
            d_wfa = np.zeros_like(wfa)
            d_bfh = np.zeros_like(bfh)
            carry = np.zeros((batch, node.state_dim))
            for t in range(steps - 1, -1, -1):
                g = (grads[t] @ wfy.T + carry) * (1.0 - hf[t + 1] ** 2)
                d_wfh += hf[t].T @ g
                d_wfa += step_inputs[t].data.T @ g
                d_bfh += g.sum(axis=0)
                tc._accumulate(step_inputs[t], g @ wfa.T)
                carry = g @ wfh.T
            tc._accumulate(node.wfh, d_wfh)
            tc._accumulate(node.wfa, d_wfa)
            tc._accumulate(node.bfh, d_bfh)

            # backward stream: state at step t feeds step t-1, so sweep forward
            d_wbh = np.zeros_like(wbh)
            d_wba = np.zeros_like(wba)
            d_bbh = np.zeros_like(bbh)
            carry = np.zeros((batch, node.state_dim))
            for t in range(steps):
                g = (grads[t] @ wby.T + carry) * (1.0 - hb[t] ** 2)
                d_wbh += hb[t + 1].T @ g
                d_wba += step_inputs[t].data.T @ g
                d_bbh += g.sum(axis=0)
                tc._accumulate(step_inputs[t], g @ wba.T)
                carry = g @ wbh.T
            tc._accumulate(node.wbh, d_wbh)
            tc._accumulate(node.wba, d_wba)
            tc._accumulate(node.bbh, d_bbh)

        tape.record(backward)
    return outputs


def grammar_forward(
    net: GrammarNet,
    x: tc.Tensor,
    mode: str,
    tape: tc.Tape | None = None,
    drop_rng: np.random.Generator | None = None,
) -> tuple[tc.Tensor, dict[str, list[tc.Tensor]]]:
    """Full forward pass: base network, active chain nodes, per-joint pooling.

    Every active kinematic node reads the combined base feature at each step
    and emits one joint per step; each active top node reads, per step, the
    6 coordinates its two member chains estimated for that step and emits a
    refined 6.  The final (batch, 48) pose averages all estimates of each
    joint.  With no active nodes the base estimate is returned unchanged.
    """
    v0, combined = base_forward(net, x, mode, tape, drop_rng)
    active = set(net.active_nodes)
    if not active:
        return v0, {}

    per_node: dict[str, list[tc.Tensor]] = {}
    contributors: dict[JointId, list[tc.Tensor]] = {j: [] for j in JointId}

    for name in KINEMATIC_NODE_NAMES:
        if name not in active:
            continue
        node = net.nodes[name]
        ys = brnn_forward(tape, node, [combined] * node.steps)
        per_node[name] = ys
        for t, joint in enumerate(node.chain.joints):
            contributors[joint].append(ys[t])

    for name in SYMMETRY_NODE_NAMES + COORDINATION_NODE_NAMES:
        if name not in active:
            continue
        node = net.nodes[name]
        left, right = node.chain.members
        left_ys = per_node[f"kin.{left.name}"]
        right_ys = per_node[f"kin.{right.name}"]
        ins = [tc.concat(tape, [left_ys[t], right_ys[t]]) for t in range(node.steps)]
        ys = brnn_forward(tape, node, ins)
        per_node[name] = ys
        for t in range(node.steps):
            lj, rj = node.chain.step_joints(t)
            contributors[lj].append(tc.slice_cols(tape, ys[t], 0, 3))
            contributors[rj].append(tc.slice_cols(tape, ys[t], 3, 3))

    pooled = []
    for joint in JointId:
        ests = contributors[joint]
        if not ests:
            # masked variants can leave a joint uncovered; fall back to the base
            pooled.append(tc.slice_cols(tape, v0, 3 * int(joint), 3))
            continue
        acc = ests[0]
        for e in ests[1:]:
            acc = tc.add(tape, acc, e)
        pooled.append(tc.scale(tape, acc, 1.0 / len(ests)))
    v_final = tc.concat(tape, pooled)
    return v_final, per_node


def forward_for_variant(
    net: GrammarNet,
    x: tc.Tensor,
    mode: str,
    tape: tc.Tape | None = None,
    drop_rng: np.random.Generator | None = None,
) -> tc.Tensor:
    """The prediction tensor the network's variant trains and evaluates on."""
    if net.active_nodes:
        v_final, _ = grammar_forward(net, x, mode, tape, drop_rng)
        return v_final
    v0, _ = base_forward(net, x, mode, tape, drop_rng)
    return v0


def predict_batch(net: GrammarNet, coords2d: np.ndarray) -> np.ndarray:
    """Eval-mode lifting of raw (N, 16, 2) pixel poses to root-relative mm.

    Inputs are normalized per pose; outputs are root-centered exactly.
    """
    coords2d = np.asarray(coords2d, dtype=np.float64)
    normalized, _, _ = normalize_coords2d(coords2d)
    x = tc.Tensor(normalized.reshape(coords2d.shape[0], 2 * N_JOINTS))
    out = forward_for_variant(net, x, "eval")
    poses = out.data.reshape(-1, N_JOINTS, 3)
    return root_center_coords3d(poses)


def predict(u: Pose2D, net: GrammarNet) -> Pose3D:
    """Lift one raw 2D pose; deterministic, translation-invariant in the input."""
    return Pose3D(predict_batch(net, u.coords[None])[0])


def count_pooled_estimates(net: GrammarNet) -> int:
    """Total per-joint estimates entering the mean pool across active nodes."""
    total = 0
    for name in net.active_nodes:
        node = net.nodes[name]
        total += node.steps * node.chain.joints_per_step
    return total
