"""BH, Storey q-values, and local fdr with the Lindsey density fit."""

import numpy as np
import pytest

from deepfdr.baselines import bh, fit_two_group, local_fdr, qvalue, storey_pi0
from deepfdr.gauss import normal_pdf
from deepfdr.rng import Lanes, Rng, child_seeds
from deepfdr.volume import Volume3D

nprng = np.random.default_rng


def vec_volume(values, kind=None):
    values = np.asarray(values, dtype=np.float64)
    return Volume3D(dims=(values.size, 1, 1), data=values, kind=kind)


def bh_brute_force(p, alpha):
    s = np.sort(p)
    m = p.size
    best = 0
    for j in range(1, m + 1):
        if s[j - 1] <= j * alpha / m:
            best = j
    return best


def test_bh_worked_example():
    out = bh(vec_volume([0.01, 0.04, 0.03, 0.5]), 0.1)
    assert out.k == 3
    assert sorted(out.rejected_indices().tolist()) == [0, 1, 2]


def test_bh_degenerate():
    assert bh(vec_volume(np.zeros(5)), 0.1).k == 5
    assert bh(vec_volume(np.ones(5)), 0.1).k == 0


def test_bh_matches_brute_force():
    rng = nprng(0)
    for _ in range(200):
        m = int(rng.integers(1, 80))
        p = rng.uniform(size=m)
        alpha = float(rng.uniform(0.02, 0.4))
        assert bh(vec_volume(p), alpha).k == bh_brute_force(p, alpha)


def test_bh_monotone_in_alpha_and_permutation_invariant():
    rng = nprng(1)
    p = rng.uniform(size=60)
    prev = set()
    for alpha in (0.05, 0.1, 0.3):
        cur = set(bh(vec_volume(p), alpha).rejected_indices().tolist())
        assert prev.issubset(cur)
        prev = cur
    perm = rng.permutation(60)
    k1 = bh(vec_volume(p), 0.1).k
    k2 = bh(vec_volume(p[perm]), 0.1).k
    assert k1 == k2


def test_storey_pi0():
    assert storey_pi0(np.array([0.9, 0.8, 0.7, 0.6])) == 1.0
    assert storey_pi0(np.array([0.01, 0.02, 0.03, 0.04])) == 0.25  # floored at 1/m
    assert storey_pi0(np.array([0.9, 0.1, 0.2, 0.3])) == 0.5


def test_qvalue_worked_example():
    p = [0.01, 0.03, 0.04, 0.6, 0.7, 0.8]
    out = qvalue(vec_volume(p), 0.1)
    # pi0 = 3 / (0.5 * 6) = 1; monotone q = [.06, .08, .08, .8, .8, .8]
    expected_q = np.array([0.06, 0.08, 0.08, 0.8, 0.8, 0.8])
    assert np.allclose(out.scores.data, expected_q, atol=1e-12)
    assert out.k == 3


def test_qvalue_all_ones():
    out = qvalue(vec_volume(np.ones(6)), 0.1)
    assert out.k == 0
    assert np.allclose(out.scores.data, 1.0)


def test_qvalue_monotone_in_p():
    rng = nprng(2)
    p = rng.uniform(size=100)
    out = qvalue(vec_volume(p), 0.1)
    order = np.argsort(p)
    assert np.all(np.diff(out.scores.data[order]) >= -1e-15)


def test_qvalue_rejections_contain_bh():
    rng = nprng(3)
    for _ in range(100):
        m = int(rng.integers(20, 200))
        # mix of signal-ish and null p-values so pi0 estimates vary
        p = np.concatenate([rng.uniform(size=m // 2) ** 3, rng.uniform(size=m - m // 2)])
        alpha = float(rng.uniform(0.05, 0.3))
        pv = vec_volume(p)
        q_set = set(qvalue(pv, alpha).rejected_indices().tolist())
        b_set = set(bh(pv, alpha).rejected_indices().tolist())
        assert b_set.issubset(q_set)


def test_lindsey_density_integrates_to_one():
    z = Rng(7).block_normals(5000)
    fit = fit_two_group(z)
    assert fit.converged
    # trapezoid check over the histogram support
    lo, hi = z.min() - 0.1, z.max() + 0.1
    grid = np.linspace(lo, hi, 2001)
    from deepfdr.baselines import _lindsey_density
    evaluate, _ = _lindsey_density(z)
    integral = np.trapezoid(evaluate(grid), grid)
    assert abs(integral - 1.0) < 0.02


def test_local_fdr_null_calibration():
    hits = 0
    runs = 100
    for i in range(runs):
        z = Rng(1000 + i).block_normals(5000)
        out = local_fdr(vec_volume(z), 0.1)
        if out.k <= 5:
            hits += 1
    assert hits >= 0.95 * runs


def test_pure_null_fdr_control_bh_and_qvalue():
    # iid uniform p-values: any rejection is a false discovery, so per-rep
    # FDP is 1{k > 0}; the mean over 500 replications must stay <= alpha+0.02
    alpha = 0.1
    reps = 500
    fdp_bh = np.empty(reps)
    fdp_qv = np.empty(reps)
    for i in range(reps):
        p = Rng(40_000 + i).block_uniforms(1000)
        pv = vec_volume(p)
        fdp_bh[i] = 1.0 if bh(pv, alpha).k > 0 else 0.0
        fdp_qv[i] = 1.0 if qvalue(pv, alpha).k > 0 else 0.0
    assert fdp_bh.mean() <= alpha + 0.02
    assert fdp_qv.mean() <= alpha + 0.02


def test_local_fdr_detects_extreme_spike():
    z = np.concatenate([Rng(8).block_normals(5000), [-6.0]])
    out = local_fdr(vec_volume(z), 0.1)
    assert 5000 in out.rejected_indices()


def test_local_fdr_scores_clamped():
    z = Rng(9).block_normals(3000)
    out = local_fdr(vec_volume(z), 0.1)
    scores = out.scores.data
    assert np.all(scores >= 0.0) and np.all(scores <= 1.0)


def test_local_fdr_kde_fallback(monkeypatch, capsys):
    import deepfdr.baselines as bl
    monkeypatch.setattr(bl, "IRLS_MAX_ITER", 0)  # force non-convergence
    z = np.concatenate([Rng(11).block_normals(3000), [-6.0]])
    out = local_fdr(vec_volume(z), 0.1)
    assert "falling back to kernel density" in capsys.readouterr().err
    assert 3000 in out.rejected_indices()  # the spike survives the KDE route
    assert np.all(out.scores.data <= 1.0)


def test_local_fdr_validation():
    with pytest.raises(ValueError, match="at least 200"):
        local_fdr(vec_volume(np.linspace(-3, 3, 100)), 0.1)
    with pytest.raises(ValueError, match="degenerate"):
        local_fdr(vec_volume(np.zeros(300)), 0.1)


def test_local_fdr_spike_fdr_value_small():
    z = np.concatenate([Rng(10).block_normals(5000), [-6.0]])
    fit = fit_two_group(z)
    fdr = np.minimum(1.0, fit.pi0 * fit.f0 / fit.fhat)
    # at z = -6 under any smooth fit dominated there by the spike, fdr vanishes
    assert fdr[-1] < 0.05


def test_masked_baselines():
    rng = nprng(4)
    p = rng.uniform(size=50)
    mask = rng.uniform(size=50) < 0.6
    p[~mask] = 1.0
    out = bh(Volume3D(dims=(50, 1, 1), data=p, mask=mask), 0.2)
    assert set(out.rejected_indices().tolist()) <= set(np.nonzero(mask)[0].tolist())
