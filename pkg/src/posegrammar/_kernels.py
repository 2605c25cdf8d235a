"""Loop-bound numeric kernels, JIT-compiled when numba is available.

Path selection: set ``POSEGRAMMAR_NUMBA=0`` to force the pure-numpy fallbacks,
``POSEGRAMMAR_NUMBA=1`` to require numba (ImportError if missing).  Unset, the
numba path is used when numba imports cleanly.  Both paths implement the same
arithmetic; ``benchmarks/bench_kernels.py`` times them against each other.

Only kernels whose cost is dominated by small-matrix Python-level loops live
here.  The network math (dense affine layers) is BLAS-bound and stays on
plain numpy in the modules that own it.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("POSEGRAMMAR_NUMBA", "").strip()
if _flag == "0":
    _use_numba = False
elif _flag == "1":
    from numba import njit  # noqa: F401  (required: fail loudly if missing)

    _use_numba = True
else:
    try:
        from numba import njit  # noqa: F401

        _use_numba = True
    except ImportError:
        _use_numba = False

USING_NUMBA = _use_numba


def block_log_density_numpy(
    data: np.ndarray,
    means: np.ndarray,
    inv_blocks: np.ndarray,
    log_norms: np.ndarray,
) -> np.ndarray:
    """Per-component Gaussian log-densities under per-joint 2x2 covariance blocks.

    data: (M, 32) residual rows; means: (K, 32); inv_blocks: (K, 16, 2, 2)
    inverted covariance blocks; log_norms: (K,) precomputed
    ``-16*log(2*pi) - 0.5*sum_i(logdet block_i)``.  Returns (M, K).
    """
    m = data.shape[0]
    k = means.shape[0]
    out = np.empty((m, k))
    d2 = data.reshape(m, 16, 2)
    for j in range(k):
        diff = d2 - means[j].reshape(16, 2)
        quad = np.einsum("mia,iab,mib->m", diff, inv_blocks[j], diff, optimize=True)
        out[:, j] = log_norms[j] - 0.5 * quad
    return out


def fk_positions_numpy(
    parents: np.ndarray,
    order: np.ndarray,
    offsets: np.ndarray,
    local_rots: np.ndarray,
    roots: np.ndarray,
) -> np.ndarray:
    """Walk the skeleton tree once, batched over poses.

    parents: (16,) parent joint per joint (-1 for root); order: (16,) a
    topological visit order; offsets: (16, 3) bone vectors in the parent's
    rest frame; local_rots: (P, 16, 3, 3); roots: (P, 3) root positions.
    Returns (P, 16, 3) joint positions.
    """
    n_poses = local_rots.shape[0]
    glob = np.empty((n_poses, 16, 3, 3))
    pos = np.empty((n_poses, 16, 3))
    for j in order:
        p = parents[j]
        if p < 0:
            glob[:, j] = local_rots[:, j]
            pos[:, j] = roots
        else:
            glob[:, j] = glob[:, p] @ local_rots[:, j]
            pos[:, j] = pos[:, p] + (glob[:, j] @ offsets[j])
    return pos


if USING_NUMBA:

    @njit(cache=True)
    def _block_log_density_jit(data, means, inv_blocks, log_norms):  # pragma: no cover
        m = data.shape[0]
        k = means.shape[0]
        out = np.empty((m, k))
        for row in range(m):
            for j in range(k):
                quad = 0.0
                for i in range(16):
                    dx = data[row, 2 * i] - means[j, 2 * i]
                    dy = data[row, 2 * i + 1] - means[j, 2 * i + 1]
                    a = inv_blocks[j, i, 0, 0]
                    b = inv_blocks[j, i, 0, 1]
                    c = inv_blocks[j, i, 1, 0]
                    d = inv_blocks[j, i, 1, 1]
                    quad += dx * (a * dx + b * dy) + dy * (c * dx + d * dy)
                out[row, j] = log_norms[j] - 0.5 * quad
        return out

    @njit(cache=True)
    def _fk_positions_jit(parents, order, offsets, local_rots, roots):  # pragma: no cover
        n_poses = local_rots.shape[0]
        glob = np.empty((n_poses, 16, 3, 3))
        pos = np.empty((n_poses, 16, 3))
        for p_idx in range(n_poses):
            for oi in range(order.shape[0]):
                j = order[oi]
                par = parents[j]
                if par < 0:
                    glob[p_idx, j] = local_rots[p_idx, j]
                    pos[p_idx, j] = roots[p_idx]
                else:
                    glob[p_idx, j] = glob[p_idx, par] @ local_rots[p_idx, j]
                    pos[p_idx, j] = pos[p_idx, par] + glob[p_idx, j] @ offsets[j]
        return pos

    def block_log_density(data, means, inv_blocks, log_norms):
        return _block_log_density_jit(
            np.ascontiguousarray(data),
            np.ascontiguousarray(means),
            np.ascontiguousarray(inv_blocks),
            np.ascontiguousarray(log_norms),
        )

    def fk_positions(parents, order, offsets, local_rots, roots):
        return _fk_positions_jit(
            np.ascontiguousarray(parents),
            np.ascontiguousarray(order),
            np.ascontiguousarray(offsets),
            np.ascontiguousarray(local_rots),
            np.ascontiguousarray(roots),
        )

else:
    block_log_density = block_log_density_numpy
    fk_positions = fk_positions_numpy


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    """Stabilized log(sum(exp(x), axis=1)) for an (M, K) array."""
    hi = x.max(axis=1, keepdims=True)
    return (hi + np.log(np.exp(x - hi).sum(axis=1, keepdims=True))).ravel()
