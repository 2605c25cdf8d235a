"""Gaussian-mixture model of 2D detection residuals, and sampling from it.

The model lives on residual vectors ``detection - ground_truth`` flattened to
32 entries.  Covariances are constrained to one independent 2x2 block per
joint; fitting is EM warm-started by k-means, and simulated detections are
drawn as ``ground_truth + sampled_residual``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .skeleton import N_JOINTS, Pose2D

RESIDUAL_DIM = 2 * N_JOINTS
COV_EIG_FLOOR = 1e-6  # px^2, applied to every fitted 2x2 block
WEIGHT_PRUNE_EPS = 1e-12
KMEANS_MAX_ITERS = 100
_LOG_2PI = float(np.log(2.0 * np.pi))


class InsufficientData(ValueError):
    """Fewer residual rows than mixture components."""


class NumericalCollapse(RuntimeWarning):
    """A component's weight collapsed below the prune threshold during EM."""


@dataclass(frozen=True, eq=False)
class ResidualSet:
    """M x 32 residual rows, one flattened 2D pose difference per row."""

    residuals: np.ndarray

    def __post_init__(self):
        arr = np.array(self.residuals, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != RESIDUAL_DIM:
            raise ValueError(f"residuals must be (M, {RESIDUAL_DIM}), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("residuals must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "residuals", arr)

    def __len__(self) -> int:
        return self.residuals.shape[0]


@dataclass(frozen=True, eq=False)
class ResidualMixture:
    """Gaussian mixture with per-joint block-diagonal covariance.

    weights: (K,), means: (K, 32), joint_covs: (K, 16, 2, 2).
    """

    weights: np.ndarray
    means: np.ndarray
    joint_covs: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.array(self.means, dtype=np.float64)
        cov = np.array(self.joint_covs, dtype=np.float64)
        k = w.shape[0]
        if w.ndim != 1 or mu.shape != (k, RESIDUAL_DIM) or cov.shape != (k, N_JOINTS, 2, 2):
            raise ValueError("inconsistent mixture parameter shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1 within 1e-9")
        if not np.allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-12):
            raise ValueError("covariance blocks must be symmetric")
        eigs = np.linalg.eigvalsh(cov)
        if np.any(eigs < COV_EIG_FLOOR * (1.0 - 1e-6)):
            raise ValueError(f"covariance block eigenvalue below the {COV_EIG_FLOOR} floor")
        for arr in (w, mu, cov):
            arr.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "joint_covs", cov)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def block_cholesky(self) -> np.ndarray:
        """(K, 16, 2, 2) lower Cholesky factors of the covariance blocks."""
        return np.linalg.cholesky(self.joint_covs)


def floor_blocks(blocks: np.ndarray, floor: float = COV_EIG_FLOOR) -> np.ndarray:
    """Clip the eigenvalues of symmetric (..., 2, 2) blocks from below."""
    sym = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.maximum(eigvals, floor)
    out = eigvecs @ (eigvals[..., :, None] * np.swapaxes(eigvecs, -1, -2))
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _as_rows(data) -> np.ndarray:
    if isinstance(data, ResidualSet):
        return data.residuals
    return ResidualSet(np.asarray(data)).residuals


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, tuple):
        return np.random.default_rng(np.random.SeedSequence(seed))
    return np.random.default_rng(seed)


def _component_stats(rows: np.ndarray, mean: np.ndarray, resp: np.ndarray | None = None):
    """Per-joint 2x2 second moments of ``rows`` about ``mean``.

    With ``resp`` given, moments are responsibility-weighted (weights must sum
    to 1 over rows); otherwise plain averages.
    """
    diff = (rows - mean).reshape(rows.shape[0], N_JOINTS, 2)
    if resp is None:
        cov = np.einsum("mia,mib->iab", diff, diff) / rows.shape[0]
    else:
        cov = np.einsum("m,mia,mib->iab", resp, diff, diff)
    return cov


def kmeans_init(data, k: int, seed) -> ResidualMixture:
    """K-means clustering of residual rows, packaged as a mixture warm start.

    Uses k-means++ seeding, at most 100 Lloyd iterations, and stops when the
    assignment vector stabilizes.  Empty clusters are re-seeded at the point
    farthest from the cluster's former centroid.
    """
    rows = _as_rows(data)
    m = rows.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if m < k:
        raise InsufficientData(f"{m} rows cannot support {k} components")
    rng = _rng(seed)

    centers = np.empty((k, RESIDUAL_DIM))
    centers[0] = rows[rng.integers(m)]
    closest_sq = np.sum((rows - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest_sq.sum()
        if total <= 0:
            centers[j] = rows[rng.integers(m)]
        else:
            centers[j] = rows[rng.choice(m, p=closest_sq / total)]
        closest_sq = np.minimum(closest_sq, np.sum((rows - centers[j]) ** 2, axis=1))

    assign = np.full(m, -1)
    for _ in range(KMEANS_MAX_ITERS):
        d2 = (
            np.sum(rows**2, axis=1)[:, None]
            - 2.0 * rows @ centers.T
            + np.sum(centers**2, axis=1)[None, :]
        )
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = rows[assign == j]
            if members.shape[0] == 0:
                farthest = int(np.argmax(np.sum((rows - centers[j]) ** 2, axis=1)))
                centers[j] = rows[farthest]
                assign[farthest] = j
            else:
                centers[j] = members.mean(axis=0)

    weights = np.empty(k)
    covs = np.empty((k, N_JOINTS, 2, 2))
    for j in range(k):
        members = rows[assign == j]
        weights[j] = members.shape[0] / m
        if members.shape[0] == 0:
            covs[j] = COV_EIG_FLOOR * np.eye(2)
            continue
        centers[j] = members.mean(axis=0)
        covs[j] = floor_blocks(_component_stats(members, centers[j]))
    keep = weights > 0  # duplicate-point ties can starve a cluster
    weights, centers, covs = weights[keep], centers[keep], covs[keep]
    return ResidualMixture(weights / weights.sum(), centers, covs)


def _log_density_terms(model: ResidualMixture):
    inv_blocks = np.linalg.inv(model.joint_covs)
    inv_blocks = 0.5 * (inv_blocks + np.swapaxes(inv_blocks, -1, -2))
    _, logdets = np.linalg.slogdet(model.joint_covs)
    log_norms = -N_JOINTS * _LOG_2PI - 0.5 * logdets.sum(axis=1)
    return inv_blocks, log_norms


def component_log_densities(data, model: ResidualMixture) -> np.ndarray:
    """(M, K) log N(row; mu_j, Sigma_j), exploiting the per-joint block structure."""
    rows = _as_rows(data)
    inv_blocks, log_norms = _log_density_terms(model)
    return _kernels.block_log_density(rows, model.means, inv_blocks, log_norms)


def loglik(data, model: ResidualMixture) -> float:
    """Total log-likelihood of the rows under the mixture (log-sum-exp stabilized)."""
    comp = component_log_densities(data, model) + np.log(model.weights)[None, :]
    return float(_kernels.logsumexp_rows(comp).sum())


def em_fit(
    data,
    init: ResidualMixture,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> tuple[ResidualMixture, list[float]]:
    """Block-diagonal EM from a warm start.

    The covariance M-step is computed independently per 2x2 joint block, which
    keeps the fitted model inside the block-diagonal family.  Returns the
    fitted mixture and the log-likelihood trace (one entry per E-step,
    including the final parameters' likelihood); the trace is nondecreasing up
    to 1e-7 per step.  Components whose weight collapses below 1e-12 are
    pruned with a :class:`NumericalCollapse` warning and the fit continues.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rows = _as_rows(data)
    if rows.shape[0] < init.n_components:
        raise InsufficientData("fewer rows than mixture components")
    m = rows.shape[0]
    weights = init.weights.copy()
    means = init.means.copy()
    covs = init.joint_covs.copy()
    trace: list[float] = []

    for _ in range(max_iters):
        model = ResidualMixture(weights, means, covs)
        comp = component_log_densities(rows, model) + np.log(weights)[None, :]
        row_ll = _kernels.logsumexp_rows(comp)
        trace.append(float(row_ll.sum()))
        if len(trace) >= 2 and trace[-1] - trace[-2] < tol:
            break

        resp = np.exp(comp - row_ll[:, None])
        mass = resp.sum(axis=0)
        new_weights = mass / m

        keep = new_weights >= WEIGHT_PRUNE_EPS
        if not np.all(keep):
            warnings.warn(
                f"pruned {int((~keep).sum())} collapsed mixture component(s)",
                NumericalCollapse,
            )
            resp = resp[:, keep]
            mass = mass[keep]
            new_weights = mass / mass.sum()
            means = means[keep]
            covs = covs[keep]
        else:
            new_weights = new_weights / new_weights.sum()

        k = resp.shape[1]
        weights = new_weights
        means = (resp.T @ rows) / mass[:, None]
        covs = np.empty((k, N_JOINTS, 2, 2))
        for j in range(k):
            covs[j] = floor_blocks(_component_stats(rows, means[j], resp[:, j] / mass[j]))

    final = ResidualMixture(weights, means, covs)
    if len(trace) < max_iters + 1 and (len(trace) < 2 or trace[-1] - trace[-2] >= tol):
        trace.append(loglik(rows, final))
    return final, trace


def sample_residual(model: ResidualMixture, seed, chol: np.ndarray | None = None) -> np.ndarray:
    """One 32-entry residual draw; deterministic given the seed.

    Draw order is fixed (component index, then 32 standard normals) so bulk
    samplers can reproduce single draws exactly.
    """
    rng = _rng(seed)
    j = int(rng.choice(model.n_components, p=model.weights))
    z = rng.standard_normal(RESIDUAL_DIM).reshape(N_JOINTS, 2, 1)
    if chol is None:
        chol = model.block_cholesky()
    eps = (chol[j] @ z)[:, :, 0] + model.means[j].reshape(N_JOINTS, 2)
    return eps.reshape(RESIDUAL_DIM)


def sample_detection(gt: Pose2D, model: ResidualMixture, seed) -> Pose2D:
    """Simulate a detector output for a ground-truth 2D pose."""
    eps = sample_residual(model, seed)
    return Pose2D(gt.coords + eps.reshape(N_JOINTS, 2))


def sample_detections(
    gt_coords: np.ndarray,
    model: ResidualMixture,
    global_seed: int,
    epoch: int,
) -> np.ndarray:
    """Corrupt a (N, 16, 2) stack of ground-truth poses, one draw per pose.

    Pose ``i`` uses the seed tuple (global_seed, epoch, i), so each pose's
    draw matches a standalone :func:`sample_detection` call with that seed and
    is independent of batch composition.
    """
    gt_coords = np.asarray(gt_coords, dtype=np.float64)
    chol = model.block_cholesky()
    out = np.empty_like(gt_coords)
    for i in range(gt_coords.shape[0]):
        eps = sample_residual(model, (int(global_seed), int(epoch), i), chol=chol)
        out[i] = gt_coords[i] + eps.reshape(N_JOINTS, 2)
    return out


def white_noise_baseline(sigma: float) -> ResidualMixture:
    """Single-component, zero-mean, isotropic mixture: the naive noise model."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    covs = np.tile(sigma**2 * np.eye(2), (1, N_JOINTS, 1, 1))
    return ResidualMixture(np.ones(1), np.zeros((1, RESIDUAL_DIM)), covs)


def mixture_to_text(model: ResidualMixture) -> str:
    """Serialize: header ``K 16``, then one line per component
    (weight, 32 means, 16 row-major 2x2 blocks)."""
    lines = [f"{model.n_components} {N_JOINTS}"]
    for j in range(model.n_components):
        vals = [model.weights[j], *model.means[j], *model.joint_covs[j].reshape(-1)]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def mixture_from_text(text: str) -> ResidualMixture:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError("empty mixture file")
    header = lines[0].split()
    if len(header) != 2 or header[1] != str(N_JOINTS):
        raise ValueError(f"bad mixture header {lines[0]!r}")
    k = int(header[0])
    if len(lines) != 1 + k:
        raise ValueError(f"expected {k} component lines, found {len(lines) - 1}")
    weights = np.empty(k)
    means = np.empty((k, RESIDUAL_DIM))
    covs = np.empty((k, N_JOINTS, 2, 2))
    for j, line in enumerate(lines[1:]):
        vals = np.array([float(tok) for tok in line.split()])
        if vals.shape[0] != 1 + RESIDUAL_DIM + N_JOINTS * 4:
            raise ValueError(f"component line {j + 1} has {vals.shape[0]} fields")
        weights[j] = vals[0]
        means[j] = vals[1 : 1 + RESIDUAL_DIM]
        covs[j] = vals[1 + RESIDUAL_DIM :].reshape(N_JOINTS, 2, 2)
    return ResidualMixture(weights, means, covs)
