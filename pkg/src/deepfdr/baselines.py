"""Classic large-scale testing baselines: BH step-up, Storey q-values, and
local false discovery rates with a Lindsey-method marginal density fit.

These serve both as comparison methods and as the reference set for the
label-flipping step.  All three operate on masked voxels only and return the
same outcome type as the LIS module.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .gauss import normal_pdf, two_sided_pvalue
from .lis import TestOutcome, _outcome_from_rejected, prefix_mean_cutoff
from .volume import Volume3D

STOREY_LAMBDA = 0.5
LINDSEY_BINS = 120
LINDSEY_DEGREE = 7
LINDSEY_PAD = 0.1
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 200


def _require_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")


def bh(p: Volume3D, alpha: float) -> TestOutcome:
    """Benjamini-Hochberg step-up on masked p-values."""
    _require_alpha(alpha)
    midx = p.masked_indices()
    if midx.size == 0:
        raise ValueError("empty mask")
    values = p.data[midx]
    m = values.size
    order = np.argsort(values, kind="stable")
    thresholds = alpha * np.arange(1, m + 1) / m
    below = np.nonzero(values[order] <= thresholds)[0]
    k = int(below[-1] + 1) if below.size else 0
    return _outcome_from_rejected(p, midx[order[:k]], alpha, "bh")


def storey_pi0(pvalues: np.ndarray, lam: float = STOREY_LAMBDA) -> float:
    """pi0 = min(1, max(#{p > lam} / ((1 - lam) m), 1/m))."""
    m = pvalues.size
    raw = np.count_nonzero(pvalues > lam) / ((1.0 - lam) * m)
    return min(1.0, max(raw, 1.0 / m))


def qvalue(p: Volume3D, alpha: float) -> TestOutcome:
    """Storey q-values (lambda = 0.5, monotone by suffix minima); reject q <= alpha."""
    _require_alpha(alpha)
    midx = p.masked_indices()
    if midx.size == 0:
        raise ValueError("empty mask")
    values = p.data[midx]
    m = values.size
    pi0 = storey_pi0(values)
    order = np.argsort(values, kind="stable")
    raw = pi0 * m * values[order] / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(raw[::-1])[::-1]
    rejected = midx[order[np.nonzero(q_sorted <= alpha)[0]]]
    scores = np.ones(p.m, dtype=np.float64)
    q_by_voxel = np.empty(m, dtype=np.float64)
    q_by_voxel[order] = q_sorted
    scores[midx] = q_by_voxel
    score_vol = Volume3D(dims=p.dims, data=np.clip(scores, 0.0, 1.0),
                         mask=None if p.mask is None else p.mask.copy(), kind="probability")
    return _outcome_from_rejected(p, rejected, alpha, "qvalue", scores=score_vol)


@dataclass
class TwoGroupFit:
    """Two-group model summary: null proportion, null and marginal densities
    evaluated at each masked voxel."""
    pi0: float
    f0: np.ndarray
    fhat: np.ndarray
    converged: bool


def _lindsey_density(z: np.ndarray):
    """Marginal density by Lindsey's method: histogram counts fit by Poisson
    regression on a polynomial of bin centers, via IRLS.

    Returns (evaluate, converged) where evaluate(v) gives the fitted density.
    """
    m = z.size
    lo, hi = z.min() - LINDSEY_PAD, z.max() + LINDSEY_PAD
    edges = np.linspace(lo, hi, LINDSEY_BINS + 1)
    counts, _ = np.histogram(z, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    # standardized basis for conditioning; same model space as raw powers
    mu_c, sd_c = centers.mean(), centers.std()
    design = np.vander((centers - mu_c) / sd_c, LINDSEY_DEGREE + 1, increasing=True)
    beta = np.zeros(LINDSEY_DEGREE + 1)
    beta[0] = np.log(max(counts.mean(), 1e-12))
    converged = False
    for _ in range(IRLS_MAX_ITER):
        eta = design @ beta
        eta = np.clip(eta, -30.0, 30.0)
        mu = np.exp(eta)
        w = mu
        zwork = eta + (counts - mu) / np.maximum(mu, 1e-12)
        wd = design * w[:, None]
        try:
            new_beta = np.linalg.solve(design.T @ wd, wd.T @ zwork)
        except np.linalg.LinAlgError:
            break
        step = np.max(np.abs(new_beta - beta)) / max(1.0, np.max(np.abs(new_beta)))
        beta = new_beta
        if step <= IRLS_TOL:
            converged = True
            break
    if converged:
        def evaluate(v: np.ndarray) -> np.ndarray:
            eta_v = np.vander((np.asarray(v) - mu_c) / sd_c,
                              LINDSEY_DEGREE + 1, increasing=True) @ beta
            return np.exp(np.clip(eta_v, -300.0, 30.0)) / (m * width)
        return evaluate, True
    # fallback: Gaussian kernel density, normal-reference bandwidth
    print("[localfdr] Poisson IRLS did not converge; falling back to kernel "
          "density estimation", file=sys.stderr)
    bw = 1.06 * z.std(ddof=1) * m ** (-0.2)

    def evaluate(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        out = np.empty(v.size)
        for start in range(0, v.size, 2048):
            block = v[start:start + 2048, None]
            out[start:start + 2048] = normal_pdf((block - z[None, :]) / bw).mean(axis=1) / bw
        return out.reshape(v.shape)
    return evaluate, False


def fit_two_group(z: np.ndarray) -> TwoGroupFit:
    if z.size < 200:
        raise ValueError("local fdr needs at least 200 masked voxels")
    if np.ptp(z) == 0.0:
        raise ValueError("degenerate constant z-values")
    evaluate, converged = _lindsey_density(z)
    fhat = np.maximum(evaluate(z), 1e-300)
    pi0 = storey_pi0(two_sided_pvalue(z))
    return TwoGroupFit(pi0=pi0, f0=normal_pdf(z), fhat=fhat, converged=converged)


def local_fdr(z: Volume3D, alpha: float) -> TestOutcome:
    """Efron-style local fdr against the theoretical N(0,1) null; rejection by
    the ascending prefix-mean rule on fdr values."""
    _require_alpha(alpha)
    midx = z.masked_indices()
    if midx.size == 0:
        raise ValueError("empty mask")
    values = z.data[midx]
    fit = fit_two_group(values)
    fdr = np.minimum(1.0, fit.pi0 * fit.f0 / fit.fhat)
    order, means = prefix_mean_cutoff(fdr)
    below = np.nonzero(means <= alpha)[0]
    k = int(below[-1] + 1) if below.size else 0
    rejected = midx[order[:k]]
    scores = np.ones(z.m, dtype=np.float64)
    scores[midx] = fdr
    score_vol = Volume3D(dims=z.dims, data=scores,
                         mask=None if z.mask is None else z.mask.copy(), kind="probability")
    return _outcome_from_rejected(z, rejected, alpha, "localfdr", scores=score_vol)
