"""Minimal reverse-mode differentiation engine for the lifting network.

Design: a :class:`Tensor` wraps a float64 array plus an additively-updated
gradient slot; operations are free functions that compute the forward value
eagerly and, when a :class:`Tape` is supplied, record a backward closure.
``tape.backward(loss)`` replays the closures in reverse execution order.
Passing ``tape=None`` runs any op forward-only, which is how inference and
finite-difference probes avoid bookkeeping.

Everything is float64.  Every op checks its output for non-finite values and
raises ``FloatingPointError`` immediately; nothing downstream ever sees NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CHECK_STEP = 1e-5


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class BatchTooSmall(ValueError):
    """Batch statistics need at least two rows."""


class Tensor:
    """A float64 array with a gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _grad_of(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def _checked(data: np.ndarray) -> np.ndarray:
    # sum-based probe: any NaN/Inf in the array poisons the sum
    if not math.isfinite(float(data.sum())):
        raise FloatingPointError("non-finite value produced by a forward op")
    return data


class Tape:
    """Ordered record of executed ops; replayed in reverse for gradients."""

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def record(self, backward: Callable[[], None]) -> None:
        self._records.append(backward)

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeMismatch("backward root must be a scalar tensor")
        root.grad = np.ones_like(root.data)
        for fn in reversed(self._records):
            fn()

    def __len__(self) -> int:
        return len(self._records)


class Registry:
    """Named parameter slots; insertion order is the canonical iteration order."""

    def __init__(self):
        self._slots: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def register(self, name: str, array, trainable: bool = True) -> Tensor:
        if name in self._slots:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array)
        self._slots[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def names(self) -> list[str]:
        return list(self._slots)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._slots.items()

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._slots.items() if self._trainable[n]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def zero_grad(self) -> None:
        for t in self._slots.values():
            t.grad = None

    def to_text(self) -> str:
        """Serialize as ``name ndim dims... values...`` records, one per line.

        Values use shortest round-trip decimal repr, so load(to_text()) is
        bit-exact.
        """
        lines = []
        for name, t in self._slots.items():
            head = [name, str(int(self._trainable[name])), str(t.data.ndim)]
            head += [str(d) for d in t.data.shape]
            vals = " ".join(repr(float(v)) for v in t.data.reshape(-1))
            lines.append(" ".join(head) + " " + vals if vals else " ".join(head))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Registry":
        reg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            toks = line.split()
            try:
                name, trainable, ndim = toks[0], bool(int(toks[1])), int(toks[2])
                shape = tuple(int(d) for d in toks[3 : 3 + ndim])
                vals = np.array([float(v) for v in toks[3 + ndim :]])
                reg.register(name, vals.reshape(shape), trainable=trainable)
            except (IndexError, ValueError) as exc:
                raise ValueError(f"bad registry record at line {lineno}: {exc}") from exc
        return reg


# ---------------------------------------------------------------------------
# ops


def affine(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch("affine expects a (batch, features) input")
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"affine: x{x.data.shape} w{w.data.shape} b{b.data.shape}"
        )
    out = Tensor(_checked(x.data @ w.data + b.data))
    if tape is not None:

        def backward():
            g = _grad_of(out)
            _accumulate(w, x.data.T @ g)
            _accumulate(b, g.sum(axis=0))
            _accumulate(x, g @ w.data.T)

        tape.record(backward)
    return out


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    if tape is not None:

        def backward():
            _accumulate(x, _grad_of(out) * mask)

        tape.record(backward)
    return out


def tanh_act(tape: Tape | None, x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if tape is not None:

        def backward():
            _accumulate(x, _grad_of(out) * (1.0 - y**2))

        tape.record(backward)
    return out


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")
    out = Tensor(_checked(a.data + b.data))
    if tape is not None:

        def backward():
            g = _grad_of(out)
            _accumulate(a, g)
            _accumulate(b, g)

        tape.record(backward)
    return out


def scale(tape: Tape | None, x: Tensor, c: float) -> Tensor:
    out = Tensor(_checked(x.data * c))
    if tape is not None:

        def backward():
            _accumulate(x, _grad_of(out) * c)

        tape.record(backward)
    return out


def concat(tape: Tape | None, parts: list[Tensor]) -> Tensor:
    out = Tensor(_checked(np.concatenate([p.data for p in parts], axis=-1)))
    if tape is not None:
        widths = [p.data.shape[-1] for p in parts]

        def backward():
            g = _grad_of(out)
            off = 0
            for p, w in zip(parts, widths):
                _accumulate(p, g[..., off : off + w])
                off += w

        tape.record(backward)
    return out


def slice_cols(tape: Tape | None, x: Tensor, start: int, size: int) -> Tensor:
    out = Tensor(x.data[..., start : start + size])
    if tape is not None:

        def backward():
            g = np.zeros_like(x.data)
            g[..., start : start + size] = _grad_of(out)
            _accumulate(x, g)

        tape.record(backward)
    return out


def batch_norm(
    tape: Tape | None,
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
) -> Tensor:
    """Feature-wise batch normalization over axis 0.

    Train mode uses batch statistics and folds them into the running buffers
    (momentum 0.1); eval mode normalizes by the running buffers.  The buffers
    are plain registry slots updated in place, never differentiated.
    """
    if mode == "train":
        if x.data.shape[0] < 2:
            raise BatchTooSmall("batch norm needs batch >= 2 in train mode")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean.data = (1.0 - BN_MOMENTUM) * running_mean.data + BN_MOMENTUM * mu
        running_var.data = (1.0 - BN_MOMENTUM) * running_var.data + BN_MOMENTUM * var
    elif mode == "eval":
        mu = running_mean.data
        var = running_var.data
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv_std
    out = Tensor(_checked(gamma.data * xhat + beta.data))
    if tape is not None:
        n = x.data.shape[0]

        def backward():
            g = _grad_of(out)
            _accumulate(gamma, (g * xhat).sum(axis=0))
            _accumulate(beta, g.sum(axis=0))
            if mode == "eval":
                _accumulate(x, g * gamma.data * inv_std)
            else:
                gx = g * gamma.data
                _accumulate(
                    x,
                    inv_std
                    / n
                    * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0)),
                )

        tape.record(backward)
    return out


def dropout(tape: Tape | None, x: Tensor, rate: float, mode: str, rng) -> Tensor:
    """Inverted dropout.  Eval mode returns the input tensor itself (exact identity)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if mode == "eval" or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)
    if tape is not None:

        def backward():
            _accumulate(x, _grad_of(out) * mask)

        tape.record(backward)
    return out


def euclidean_loss(
    tape: Tape | None, pred: Tensor, target: np.ndarray, squared: bool = False
) -> Tensor:
    """Mean over the batch of the per-sample L2 norm of the difference.

    ``squared=True`` switches to the mean squared norm; the default matches
    the plain-norm objective.  At an exactly-zero difference the norm's
    subgradient 0 is used.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeMismatch(f"loss: pred{pred.data.shape} vs target{target.shape}")
    if not np.all(np.isfinite(target)):
        raise ValueError("loss target must be finite")
    diff = pred.data - target
    norms = np.sqrt((diff**2).sum(axis=-1))
    n = pred.data.shape[0]
    if squared:
        value = float((norms**2).mean())
    else:
        value = float(norms.mean())
    out = Tensor(_checked(np.float64(value)))
    if tape is not None:

        def backward():
            g = float(_grad_of(out))
            if squared:
                _accumulate(pred, g * 2.0 * diff / n)
            else:
                safe = np.where(norms > 0.0, norms, 1.0)
                _accumulate(pred, g * diff / (n * safe[:, None]))

        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(registry: Registry, state: AdamState, lr: float) -> None:
    """One bias-corrected update over every trainable parameter with a gradient.

    Parameters whose gradient slot is empty (e.g. masked-out network nodes)
    are left untouched, moments included.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, t in registry.trainable_items():
        if t.grad is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * t.grad
        v *= b2
        v += (1.0 - b2) * t.grad**2
        if lr != 0.0:
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: str
    n_coords: int
    per_param: dict[str, float]

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"grad check {status}: max rel err {self.max_rel_err:.3e} "
            f"({self.worst_param}, {self.n_coords} coords probed)"
        )


def grad_check(
    fn: Callable[[Tape | None], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    h: float = GRAD_CHECK_STEP,
    rng: np.random.Generator | None = None,
    max_coords_per_param: int = 16,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` must rebuild its graph on every call (and be deterministic across
    calls, e.g. by reseeding its own dropout).  For each parameter a random
    subset of coordinates is probed with ±h perturbations.
    """
    rng = rng or np.random.default_rng(0)
    tape = Tape()
    loss = fn(tape)
    tape.backward(loss)
    analytic = {name: _grad_of(t).copy() for name, t in params.items()}
    for t in params.values():
        t.grad = None

    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    n_coords = 0
    for name, t in params.items():
        size = t.data.size
        n_probe = min(max_coords_per_param, size)
        idxs = rng.choice(size, size=n_probe, replace=False)
        flat = t.data.reshape(-1)
        worst_here = 0.0
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(fn(None).data)
            flat[idx] = orig - h
            down = float(fn(None).data)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            worst_here = max(worst_here, rel)
            n_coords += 1
        per_param[name] = worst_here
        if worst_here > worst[1]:
            worst = (name, worst_here)
    return GradCheckReport(
        passed=worst[1] < tolerance,
        max_rel_err=worst[1],
        worst_param=worst[0],
        n_coords=n_coords,
        per_param=per_param,
    )
