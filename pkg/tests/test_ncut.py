"""Affinity graph construction and the soft normalized-cut loss against a
dense reference implementation."""

import numpy as np
import pytest

from deepfdr.autodiff import Tensor, backward
from deepfdr.ncut import EPS_DEGREE, SparseWeightGraph, build_weight_graph, soft_ncut_loss
from deepfdr.volume import Volume3D, pad_to

from gradcheck import finite_diff_check

nprng = np.random.default_rng


def dense_weights(v: Volume3D, sigma_x=11.0, sigma_l=3.0, radius=3):
    """O(m^2) reference: loop every masked voxel pair."""
    mask = v.effective_mask()
    idx = np.nonzero(mask)[0]
    nx, ny, nz = v.dims
    coords = np.array([[i % nx, (i // nx) % ny, i // (nx * ny)] for i in idx], dtype=float)
    vals = v.data[idx]
    m = idx.size
    W = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            d = coords[a] - coords[b]
            if np.max(np.abs(d)) <= radius:
                W[a, b] = np.exp(-(vals[a] - vals[b]) ** 2 / sigma_x ** 2
                                 - (d @ d) / sigma_l ** 2)
    return W


def dense_ncut(p, W):
    loss = 2.0
    d = W.sum(axis=1)
    for q in (p, 1.0 - p):
        loss -= (q @ W @ q) / (d @ q + EPS_DEGREE)
    return loss


def test_weight_examples():
    rng = nprng(0)
    v = Volume3D(dims=(6, 6, 6), data=rng.normal(size=216))
    g = build_weight_graph(v)
    diag = g.matrix.diagonal()
    assert np.all(diag == 1.0)
    # equal intensities at offset (1,0,0): w = exp(-1/9)
    flat = Volume3D(dims=(5, 1, 1), data=np.zeros(5))
    gf = build_weight_graph(flat)
    W = gf.matrix.toarray()
    assert abs(W[0, 1] - np.exp(-1.0 / 9.0)) < 1e-12
    assert abs(W[0, 1] - 0.894839) < 1e-6
    # offset (4,0,0) exceeds r=3: absent
    assert W[0, 4] == 0.0


def test_graph_symmetry_range_and_radius():
    rng = nprng(1)
    v = Volume3D(dims=(5, 4, 3), data=rng.normal(size=60))
    g = build_weight_graph(v, sigma_x=2.0, sigma_l=1.5, radius=2)
    W = g.matrix
    asym = (W - W.T)
    assert asym.nnz == 0 or abs(asym).max() == 0.0
    assert W.data.min() > 0.0 and W.data.max() <= 1.0
    dense = dense_weights(v, 2.0, 1.5, 2)
    assert np.allclose(W.toarray(), dense, atol=1e-15)
    assert np.allclose(g.degree, dense.sum(axis=1), atol=1e-12)


def test_graph_masked_voxels_only():
    rng = nprng(2)
    v = Volume3D(dims=(4, 4, 4), data=rng.normal(size=64))
    padded = pad_to(v, (8, 8, 8), fill=0.0)
    g = build_weight_graph(padded)
    assert g.n == 64
    assert np.array_equal(g.masked_index, padded.masked_indices())


def test_graph_validation_errors():
    v = Volume3D(dims=(2, 2, 2), data=np.zeros(8), mask=np.zeros(8, dtype=bool))
    with pytest.raises(ValueError, match="empty mask"):
        build_weight_graph(v)
    ok = Volume3D(dims=(2, 2, 2), data=np.zeros(8))
    with pytest.raises(ValueError):
        build_weight_graph(ok, sigma_x=0.0)
    with pytest.raises(ValueError):
        build_weight_graph(ok, radius=-1)


def test_uniform_half_gives_loss_one():
    rng = nprng(3)
    v = Volume3D(dims=(6, 6, 6), data=rng.normal(size=216))
    g = build_weight_graph(v)
    loss = soft_ncut_loss(Tensor(np.full(216, 0.5)), g).item()
    assert abs(loss - 1.0) < 1e-9


def test_two_separated_blobs_hard_labels():
    # two 2x2x2 blobs separated by more than r=1 in a 7-cube
    mask = np.zeros((7, 7, 7), dtype=bool)
    mask[0:2, 0:2, 0:2] = True
    mask[5:7, 5:7, 5:7] = True
    labels = np.zeros((7, 7, 7))
    labels[5:7, 5:7, 5:7] = 1.0
    v = Volume3D.from_grid(np.zeros((7, 7, 7)), mask)
    g = build_weight_graph(v, radius=1)
    p = Volume3D.from_grid(labels, mask).masked_values()
    loss = soft_ncut_loss(Tensor(p), g).item()
    assert loss <= 1e-6


def test_degenerate_single_class():
    rng = nprng(4)
    v = Volume3D(dims=(4, 4, 4), data=rng.normal(size=64))
    g = build_weight_graph(v)
    loss = soft_ncut_loss(Tensor(np.ones(64)), g).item()
    assert abs(loss - 1.0) < 1e-9


def test_class_symmetry_exact():
    rng = nprng(5)
    v = Volume3D(dims=(4, 4, 4), data=rng.normal(size=64))
    g = build_weight_graph(v)
    p = rng.uniform(size=64)
    a = soft_ncut_loss(Tensor(p), g).item()
    b = soft_ncut_loss(Tensor(1.0 - p), g).item()
    assert a == b


def test_loss_within_bounds():
    rng = nprng(6)
    v = Volume3D(dims=(4, 4, 4), data=rng.normal(size=64))
    g = build_weight_graph(v)
    for _ in range(30):
        loss = soft_ncut_loss(Tensor(rng.uniform(size=64)), g).item()
        assert 0.0 <= loss <= 2.0


def test_permutation_equivariance_via_axis_relabeling():
    rng = nprng(7)
    grid = rng.normal(size=(3, 4, 5))
    prob = rng.uniform(size=(3, 4, 5))
    va = Volume3D.from_grid(grid)
    vb = Volume3D.from_grid(grid.transpose(2, 1, 0))
    ga, gb = build_weight_graph(va), build_weight_graph(vb)
    la = soft_ncut_loss(Tensor(Volume3D.from_grid(prob).data), ga).item()
    lb = soft_ncut_loss(Tensor(Volume3D.from_grid(prob.transpose(2, 1, 0)).data), gb).item()
    assert abs(la - lb) < 1e-12


def test_sparse_matches_dense_reference():
    rng = nprng(8)
    for dims in ((4, 4, 4), (6, 6, 6), (3, 8, 9)):
        m = dims[0] * dims[1] * dims[2]
        v = Volume3D(dims=dims, data=rng.normal(size=m))
        g = build_weight_graph(v)
        W = dense_weights(v)
        p = rng.uniform(size=m)
        sparse_loss = soft_ncut_loss(Tensor(p), g).item()
        assert abs(sparse_loss - dense_ncut(p, W)) < 1e-12


def test_probability_validation():
    v = Volume3D(dims=(2, 2, 2), data=np.zeros(8))
    g = build_weight_graph(v)
    with pytest.raises(ValueError, match="lie in"):
        soft_ncut_loss(Tensor(np.full(8, 1.1)), g)
    with pytest.raises(ValueError, match="entries"):
        soft_ncut_loss(Tensor(np.full(4, 0.5)), g)


def test_custom_gradient_matches_fd():
    rng = nprng(9)
    v = Volume3D(dims=(4, 4, 4), data=rng.normal(size=64))
    g = build_weight_graph(v)
    p = Tensor(rng.uniform(0.05, 0.95, size=64), requires_grad=True)
    assert finite_diff_check(lambda: soft_ncut_loss(p, g), [p]) < 1e-6


def test_gradient_direction_reduces_loss():
    rng = nprng(10)
    v = Volume3D(dims=(4, 4, 4), data=rng.normal(size=64))
    g = build_weight_graph(v)
    p = Tensor(rng.uniform(0.2, 0.8, size=64), requires_grad=True)
    loss = soft_ncut_loss(p, g)
    backward(loss)
    stepped = np.clip(p.data - 0.05 * p.grad, 0.0, 1.0)
    assert soft_ncut_loss(Tensor(stepped), g).item() < loss.item()
