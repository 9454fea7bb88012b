"""Simulation harness: clustered ground-truth labels, Gaussian-mixture test
statistics, replication studies, and FDR/FNR/ATP metrics.

Truth cubes are unions of random ellipsoids trimmed to hit a target signal
proportion; statistics follow the two-group model where null voxels draw
N(0, 1) and signal voxels draw the equal-weight mixture of N(mu1, sigma1^2)
and N(2, 1).

Seed discipline (see rng module for the primitives): for a setting seed ``s``,
labels use stream ``split_seed(s, 0)``; replication ``r`` (0-based) gets
``rep_seed = split_seed(s, r + 1)``, with statistics drawn from per-voxel
substreams of ``split_seed(rep_seed, 0)`` and the network seeded by
``split_seed(rep_seed, 1)``.  Replications are therefore independent of
execution order and worker count.
"""

from __future__ import annotations

import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import multiprocessing as mp

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import bh, local_fdr, qvalue
from .gauss import normal_pdf
from .lis import TestOutcome, deepfdr_pipeline_detailed, lis_threshold
from .rng import Lanes, Rng, child_seeds, split_seed
from .volume import Volume3D, z_to_pvalue
from .wnet import WnetConfig

METHODS = ("bh", "qvalue", "localfdr", "deepfdr", "oracle-lis")

BLOB_AXIS_MIN = 2.0
BLOB_AXIS_MAX = 6.0
PROPORTION_TOL = 0.01


@dataclass(frozen=True)
class SimSetting:
    dims: tuple[int, int, int] = (30, 30, 30)
    target_p1: float = 0.2
    mu1: float = -2.0
    sigma1sq: float = 1.0
    seed: int = 0
    replications: int = 50
    setting_id: str = ""

    def __post_init__(self):
        if not 0.01 < self.target_p1 < 0.9:
            raise ValueError("target_p1 must lie in (0.01, 0.9)")
        if self.sigma1sq <= 0:
            raise ValueError("sigma1sq must be positive")
        if self.replications <= 0:
            raise ValueError("replications must be positive")
        if not self.setting_id:
            object.__setattr__(self, "setting_id",
                               f"mu{self.mu1:g}_sg{self.sigma1sq:g}_p{self.target_p1:g}")


def generate_labels_blobs(dims, target_p1: float, rng: Rng) -> Volume3D:
    """Union of random axis-aligned ellipsoids trimmed to land the signal
    proportion inside target_p1 +/- 0.01.

    Each ellipsoid draws six uniforms in order (cx, cy, cz, ax, ay, az):
    centers uniform over [0, n-1] per axis, semi-axes uniform in [2, 6].
    When an ellipsoid overshoots the band, its newly added voxels are removed
    outermost first (by descending ellipsoid quadratic form, ties by linear
    index) until the proportion falls inside the band.
    """
    if not 0.01 < target_p1 < 0.9:
        raise ValueError("target_p1 must lie in (0.01, 0.9)")
    dims = tuple(int(d) for d in dims)
    nx, ny, nz = dims
    m = nx * ny * nz
    lo, hi = target_p1 - PROPORTION_TOL, target_p1 + PROPORTION_TOL
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    labels = np.zeros((nx, ny, nz), dtype=bool)
    while labels.sum() / m < lo:
        cx = rng.uniform() * (nx - 1)
        cy = rng.uniform() * (ny - 1)
        cz = rng.uniform() * (nz - 1)
        ax = BLOB_AXIS_MIN + rng.uniform() * (BLOB_AXIS_MAX - BLOB_AXIS_MIN)
        ay = BLOB_AXIS_MIN + rng.uniform() * (BLOB_AXIS_MAX - BLOB_AXIS_MIN)
        az = BLOB_AXIS_MIN + rng.uniform() * (BLOB_AXIS_MAX - BLOB_AXIS_MIN)
        form = ((ix - cx) / ax) ** 2 + ((iy - cy) / ay) ** 2 + ((iz - cz) / az) ** 2
        inside = form <= 1.0
        new = inside & ~labels
        labels |= inside
        if labels.sum() / m > hi:
            new_flat = np.nonzero(new.transpose(2, 1, 0).reshape(-1))[0]
            form_flat = form.transpose(2, 1, 0).reshape(-1)[new_flat]
            trim_order = new_flat[np.lexsort((new_flat, -form_flat))]
            flat = labels.transpose(2, 1, 0).reshape(-1)
            excess = int(labels.sum() - math.floor(hi * m))
            flat[trim_order[:excess]] = False
            labels = flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    return Volume3D.from_grid(labels.astype(np.float64), kind="label")


def sample_statistics(h: Volume3D, mu1: float, sigma1sq: float, rng: Rng
                      ) -> tuple[Volume3D, Volume3D]:
    """Two-group mixture statistics given binary truth labels.

    Voxel i draws from its own substream ``split_seed(rng.seed, i)``: null
    voxels one standard normal; signal voxels one uniform (component pick,
    u < 0.5 selects the (mu1, sigma1^2) component) then one standard normal.
    """
    labels = h.data
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be binary")
    m = h.m
    seeds = child_seeds(rng.seed, m)
    x = np.empty(m, dtype=np.float64)
    is_signal = labels == 1.0
    null_idx = np.nonzero(~is_signal)[0]
    sig_idx = np.nonzero(is_signal)[0]
    if null_idx.size:
        x[null_idx] = Lanes(seeds[null_idx]).normal()
    if sig_idx.size:
        lanes = Lanes(seeds[sig_idx])
        u = lanes.uniform()
        z = lanes.normal()
        sd1 = math.sqrt(sigma1sq)
        x[sig_idx] = np.where(u < 0.5, mu1 + sd1 * z, 2.0 + z)
    xvol = Volume3D(dims=h.dims, data=x,
                    mask=None if h.mask is None else h.mask.copy(), kind="statistic")
    return xvol, z_to_pvalue(xvol)


def oracle_lis_iid(x: Volume3D, pi0: float, mu1: float, sigma1sq: float) -> Volume3D:
    """Exact posterior null probability under the independent two-group model:
    pi0 f0(x) / (pi0 f0(x) + (1 - pi0) f1(x)) with f1 the equal-weight
    mixture of N(mu1, sigma1^2) and N(2, 1)."""
    if not 0.0 < pi0 < 1.0:
        raise ValueError("pi0 must lie in (0, 1)")
    v = x.data
    f0 = normal_pdf(v)
    f1 = 0.5 * normal_pdf(v, mean=mu1, sd=math.sqrt(sigma1sq)) + 0.5 * normal_pdf(v, mean=2.0)
    lis = pi0 * f0 / (pi0 * f0 + (1.0 - pi0) * f1)
    if x.mask is not None:
        lis = np.where(x.mask, lis, 1.0)
    return Volume3D(dims=x.dims, data=np.clip(lis, 0.0, 1.0),
                    mask=None if x.mask is None else x.mask.copy(), kind="probability")


@dataclass
class ConfusionRecord:
    n00: int
    n10: int
    n01: int
    n11: int
    a: int
    r: int
    m0: int
    m1: int
    fdp: float
    fnp: float
    tp: int


def compute_metrics(outcome: TestOutcome, truth: Volume3D) -> ConfusionRecord:
    """Confusion counts over masked voxels; FDP = N10/(R v 1), FNP = N01/(A v 1)."""
    if outcome.rejections.dims != truth.dims:
        raise ValueError("dims mismatch between outcome and truth")
    mask = truth.effective_mask()
    if not np.array_equal(mask, outcome.rejections.effective_mask()):
        raise ValueError("mask mismatch between outcome and truth")
    rej = outcome.rejections.data[mask] > 0.5
    sig = truth.data[mask] > 0.5
    n11 = int(np.count_nonzero(rej & sig))
    n10 = int(np.count_nonzero(rej & ~sig))
    n01 = int(np.count_nonzero(~rej & sig))
    n00 = int(np.count_nonzero(~rej & ~sig))
    r = n10 + n11
    a = n00 + n01
    return ConfusionRecord(n00=n00, n10=n10, n01=n01, n11=n11, a=a, r=r,
                           m0=n00 + n10, m1=n01 + n11,
                           fdp=n10 / max(r, 1), fnp=n01 / max(a, 1), tp=n11)


@dataclass
class MethodRow:
    setting_id: str
    mu1: float
    sigma1sq: float
    p1: float
    method: str
    rep: int
    seed: int
    fdp: float
    fnp: float
    tp: float
    r: float
    runtime_ms: float


@dataclass
class MethodAggregate:
    setting_id: str
    method: str
    fdr: float
    fnr: float
    atp: float
    mean_runtime_ms: float
    sd_runtime_ms: float


@dataclass
class ReplicationStudy:
    setting: SimSetting
    truth: Volume3D
    rows: list[MethodRow]
    aggregates: list[MethodAggregate]


def padded_dims_for(dims) -> tuple[int, int, int]:
    """Smallest dims divisible by 4 that contain ``dims``."""
    return tuple(4 * math.ceil(d / 4) for d in dims)


def _run_methods_for_rep(setting: SimSetting, truth: Volume3D, methods, alpha: float,
                         wnet_template: WnetConfig, rep: int) -> list[MethodRow]:
    rep_seed = split_seed(setting.seed, rep + 1)
    x, p = sample_statistics(truth, setting.mu1, setting.sigma1sq,
                             Rng(split_seed(rep_seed, 0)))
    realized_p1 = float(truth.data.mean())
    rows = []
    with threadpool_limits(limits=1):
        for method in methods:
            t0 = time.perf_counter()
            try:
                if method == "bh":
                    outcome = bh(p, alpha)
                elif method == "qvalue":
                    outcome = qvalue(p, alpha)
                elif method == "localfdr":
                    outcome = local_fdr(x, alpha)
                elif method == "oracle-lis":
                    lis = oracle_lis_iid(x, 1.0 - setting.target_p1,
                                         setting.mu1, setting.sigma1sq)
                    outcome = lis_threshold(lis, alpha, method="oracle-lis")
                elif method == "deepfdr":
                    cfg = replace(wnet_template,
                                  padded_dims=padded_dims_for(setting.dims),
                                  seed=split_seed(rep_seed, 1))
                    outcome = deepfdr_pipeline_detailed(x, p, alpha, cfg).outcome
                else:
                    raise ValueError(f"unknown method {method!r}")
                rec = compute_metrics(outcome, truth)
                fdp, fnp, tp, r = rec.fdp, rec.fnp, float(rec.tp), float(rec.r)
            except Exception as e:  # record the failure, keep the study running
                print(f"[sim] method {method} failed on rep {rep}: {e}", file=sys.stderr)
                fdp = fnp = tp = r = float("nan")
            runtime_ms = (time.perf_counter() - t0) * 1e3
            rows.append(MethodRow(setting.setting_id, setting.mu1, setting.sigma1sq,
                                  realized_p1, method, rep, rep_seed,
                                  fdp, fnp, tp, r, runtime_ms))
    return rows


def run_replications(setting: SimSetting, methods, alpha: float, workers: int = 1,
                     wnet_template: WnetConfig | None = None) -> ReplicationStudy:
    """Run each method on every replication; truth is generated once per
    setting and statistics are redrawn per replication."""
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    wnet_template = wnet_template or WnetConfig()
    truth = generate_labels_blobs(setting.dims, setting.target_p1,
                                  Rng(split_seed(setting.seed, 0)))
    reps = range(setting.replications)
    if workers <= 1:
        per_rep = [_run_methods_for_rep(setting, truth, methods, alpha, wnet_template, r)
                   for r in reps]
    else:
        # fork: workers inherit the loaded package; each replication pins its
        # BLAS threads to one, so results are identical for any worker count
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            futures = [pool.submit(_run_methods_for_rep, setting, truth, methods,
                                   alpha, wnet_template, r) for r in reps]
            per_rep = [f.result() for f in futures]
    rows = [row for rep_rows in per_rep for row in rep_rows]
    aggregates = []
    for method in methods:
        sub = [row for row in rows if row.method == method]
        fdps = np.array([row.fdp for row in sub])
        fnps = np.array([row.fnp for row in sub])
        tps = np.array([row.tp for row in sub])
        times = np.array([row.runtime_ms for row in sub])
        aggregates.append(MethodAggregate(
            setting_id=setting.setting_id, method=method,
            fdr=float(fdps.mean()), fnr=float(fnps.mean()), atp=float(tps.mean()),
            mean_runtime_ms=float(times.mean()),
            sd_runtime_ms=float(times.std(ddof=1)) if times.size > 1 else 0.0))
    return ReplicationStudy(setting=setting, truth=truth, rows=rows, aggregates=aggregates)


def _fmt(x: float) -> str:
    return format(x, ".10g")


def write_rows_csv(rows: list[MethodRow], path) -> None:
    """Deterministic per-replication results (timings live in the sidecar)."""
    lines = ["setting_id,mu1,sigma1sq,p1,method,rep,seed,FDP,FNP,TP,R"]
    for row in rows:
        lines.append(",".join([row.setting_id, _fmt(row.mu1), _fmt(row.sigma1sq),
                               _fmt(row.p1), row.method, str(row.rep), str(row.seed),
                               _fmt(row.fdp), _fmt(row.fnp), _fmt(row.tp), _fmt(row.r)]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_aggregate_csv(aggregates: list[MethodAggregate], path) -> None:
    lines = ["setting_id,method,FDR,FNR,ATP"]
    for agg in aggregates:
        lines.append(",".join([agg.setting_id, agg.method, _fmt(agg.fdr),
                               _fmt(agg.fnr), _fmt(agg.atp)]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_timings_csv(rows: list[MethodRow], aggregates: list[MethodAggregate], path) -> None:
    """Wall-clock sidecar; excluded from byte-determinism guarantees."""
    lines = ["setting_id,method,rep,runtime_ms"]
    for row in rows:
        lines.append(",".join([row.setting_id, row.method, str(row.rep),
                               _fmt(row.runtime_ms)]))
    lines.append("setting_id,method,mean_runtime_ms,sd_runtime_ms")
    for agg in aggregates:
        lines.append(",".join([agg.setting_id, agg.method, _fmt(agg.mean_runtime_ms),
                               _fmt(agg.sd_runtime_ms)]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
