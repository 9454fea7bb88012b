"""Voxel affinity graph and the differentiable soft normalized-cut loss.

The graph connects masked voxels i, j within Chebyshev radius ``r`` with
weight ``exp(-(x_i - x_j)^2 / sigma_x^2 - ||l_i - l_j||^2 / sigma_l^2)``
(Euclidean squared distance in the spatial term, Chebyshev cutoff in the
indicator).  Self pairs are included, so w_ii = 1 and every degree is >= 1.
Padding voxels are excluded by construction: only masked voxels enter the
graph, so the partition objective never sees them.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor
from .volume import Volume3D

EPS_DEGREE = 1e-8


class SparseWeightGraph:
    """Symmetric per-voxel neighbor weights over masked voxels.

    ``matrix`` is CSR with one row per masked voxel (voxels ordered by
    ascending linear index); ``degree[i]`` is the row sum.
    """

    def __init__(self, dims, matrix: sp.csr_matrix, masked_index: np.ndarray,
                 sigma_x: float, sigma_l: float, radius: int):
        self.dims = dims
        self.matrix = matrix
        self.masked_index = masked_index
        self.degree = np.asarray(matrix.sum(axis=1)).reshape(-1)
        self.sigma_x = sigma_x
        self.sigma_l = sigma_l
        self.radius = radius

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def total_weight(self) -> float:
        return float(self.degree.sum())


def build_weight_graph(x: Volume3D, sigma_x: float = 11.0, sigma_l: float = 3.0,
                       radius: int = 3) -> SparseWeightGraph:
    """Affinity graph over the masked voxels of a statistic volume."""
    if sigma_x <= 0 or sigma_l <= 0:
        raise ValueError("sigma_x and sigma_l must be positive")
    if radius < 0 or radius != int(radius):
        raise ValueError("radius must be a nonnegative integer")
    radius = int(radius)
    mask = x.effective_mask()
    m = int(mask.sum())
    if m == 0:
        raise ValueError("empty mask: no voxels to build a graph over")
    nx, ny, nz = x.dims
    # rank[ix,iy,iz] = position of the voxel among masked voxels, -1 outside
    rank_flat = np.full(x.m, -1, dtype=np.int64)
    midx = np.nonzero(mask)[0]
    rank_flat[midx] = np.arange(m)
    rank = rank_flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    vals = x.to_grid()

    rows, cols, weights = [], [], []
    inv_sx2 = 1.0 / (sigma_x * sigma_x)
    inv_sl2 = 1.0 / (sigma_l * sigma_l)
    for dx in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            for dz in range(-radius, radius + 1):
                if abs(dx) >= nx or abs(dy) >= ny or abs(dz) >= nz:
                    continue
                src = (slice(max(0, -dx), nx - max(0, dx)),
                       slice(max(0, -dy), ny - max(0, dy)),
                       slice(max(0, -dz), nz - max(0, dz)))
                dst = (slice(max(0, dx), nx - max(0, -dx)),
                       slice(max(0, dy), ny - max(0, -dy)),
                       slice(max(0, dz), nz - max(0, -dz)))
                ri = rank[src].reshape(-1)
                rj = rank[dst].reshape(-1)
                ok = (ri >= 0) & (rj >= 0)
                if not ok.any():
                    continue
                dv = (vals[src].reshape(-1)[ok] - vals[dst].reshape(-1)[ok])
                dist2 = float(dx * dx + dy * dy + dz * dz)
                w = np.exp(-dv * dv * inv_sx2 - dist2 * inv_sl2)
                rows.append(ri[ok])
                cols.append(rj[ok])
                weights.append(w)
    matrix = sp.coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m)).tocsr()
    return SparseWeightGraph(x.dims, matrix, midx, sigma_x, sigma_l, radius)


def soft_ncut_loss(prob: Tensor, graph: SparseWeightGraph) -> Tensor:
    """Soft two-class normalized-cut loss with a hand-derived gradient.

    For class vectors q0 = P and q1 = 1 - P:
    loss = 2 - sum_k N_k / (D_k + eps) with N_k = q^T W q and D_k = d . q.
    The degree guard eps makes an empty class contribute 0.
    """
    p = prob.data.reshape(-1)
    if p.shape[0] != graph.n:
        raise ValueError(f"probability vector has {p.shape[0]} entries, graph has {graph.n}")
    if np.any(p < -1e-9) or np.any(p > 1.0 + 1e-9):
        raise ValueError("class probabilities must lie in [0, 1]")
    W, d = graph.matrix, graph.degree
    qs = (p, 1.0 - p)
    wq = [W @ q for q in qs]
    nums = [float(q @ v) for q, v in zip(qs, wq)]
    dens = [float(d @ q) + EPS_DEGREE for q in qs]
    loss = 2.0 - sum(n / de for n, de in zip(nums, dens))

    def bwd(g):
        # d/dq_i [N/(D+eps)] = (2 (Wq)_i (D+eps) - N d_i) / (D+eps)^2,
        # with dq0/dP = +1 and dq1/dP = -1.
        grad = np.zeros_like(p)
        for sign, q, v, n, de in zip((1.0, -1.0), qs, wq, nums, dens):
            grad -= sign * (2.0 * v * de - n * d) / (de * de)
        return (float(g) * grad.reshape(prob.data.shape),)

    return Tensor(np.float64(loss), parents=(prob,), backward=bwd, op="soft_ncut_loss")
