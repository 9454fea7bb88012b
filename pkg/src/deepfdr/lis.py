"""LIS-based rejection procedure, Dice overlap, label flipping, and the
end-to-end pipeline from a statistic volume to a rejection set.

The rejection rule sorts per-voxel null-probability estimates ascending and
rejects the largest prefix whose running mean stays at or below the nominal
level.  Because unsupervised segmentation labels its two classes arbitrarily,
the candidate map is compared against a reference discovery set (q-value
method, with a documented fallback ladder) and flipped when its complement
matches the reference better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ncut import build_weight_graph
from .rng import Rng, split_seed
from .volume import Volume3D, pad_to
from .wnet import EpochRecord, WnetConfig, build_wnet, predict_prob
from .wnet import train as train_wnet

QVALUE_LADDER = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
PVALUE_LADDER = (1.0, 0.5, 0.2, 0.1)


@dataclass
class TestOutcome:
    """Rejection decision for one method at one nominal level."""

    __test__ = False  # not a pytest class, despite the name

    rejections: Volume3D
    k: int
    alpha: float
    method: str
    scores: Volume3D | None = None

    def __post_init__(self):
        if self.k != int(self.rejections.data.sum()):
            raise ValueError("k must equal the number of rejected voxels")
        if self.rejections.mask is not None:
            if np.any(self.rejections.data[~self.rejections.mask] != 0.0):
                raise ValueError("rejections outside the volume mask")

    def rejected_indices(self) -> np.ndarray:
        return np.nonzero(self.rejections.data > 0.5)[0]


def _outcome_from_rejected(base: Volume3D, rejected_linear: np.ndarray, alpha: float,
                           method: str, scores: Volume3D | None = None) -> TestOutcome:
    data = np.zeros(base.m, dtype=np.float64)
    data[rejected_linear] = 1.0
    vol = Volume3D(dims=base.dims, data=data,
                   mask=None if base.mask is None else base.mask.copy(), kind="rejection")
    return TestOutcome(rejections=vol, k=int(rejected_linear.size), alpha=alpha,
                       method=method, scores=scores)


def prefix_mean_cutoff(values: np.ndarray) -> np.ndarray:
    """Running means of ascending values (the rejection rule's threshold curve)."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    return order, np.cumsum(sorted_vals) / np.arange(1, values.size + 1)


def lis_threshold(lis: Volume3D, alpha: float, method: str = "lis") -> TestOutcome:
    """Reject the k smallest values where k is the largest prefix whose mean
    stays <= alpha; ties at the cut resolve by ascending (value, linear index)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    midx = lis.masked_indices()
    if midx.size == 0:
        raise ValueError("empty mask")
    values = lis.data[midx]
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise ValueError("LIS values must lie in [0, 1]")
    order, means = prefix_mean_cutoff(values)
    below = np.nonzero(means <= alpha)[0]
    k = int(below[-1] + 1) if below.size else 0
    rejected = midx[order[:k]]
    return _outcome_from_rejected(lis, rejected, alpha, method, scores=lis)


def dice(a, b) -> float:
    """Set overlap 2|A n B| / (|A| + |B|); two empty sets count as identical."""
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


@dataclass
class FlipDecision:
    flipped: bool
    reference: str            # "qvalue" or "pvalue"
    reference_level: float
    reference_size: int
    dice_keep: float
    dice_flip: float


def _reference_set(p: Volume3D, alpha: float):
    """Reference discovery set for orientation: q-value rejections at alpha,
    escalating the q-value level and then falling back to raw p-value sets
    when the reference stays too small."""
    from .baselines import qvalue  # local import; baselines builds on this module

    m = int(p.effective_mask().sum())
    min_size = max(10, math.ceil(0.001 * m))
    for factor in QVALUE_LADDER:
        level = alpha * factor
        if level >= 1.0:
            continue
        ref = qvalue(p, level).rejected_indices()
        if ref.size >= min_size:
            return ref, "qvalue", level
    pm = p.effective_mask()
    fallback = None
    for factor in PVALUE_LADDER:
        level = alpha * factor
        ref = np.nonzero((p.data < level) & pm)[0]
        if fallback is None:
            fallback = (ref, "pvalue", level)
        if ref.size >= min_size:
            return ref, "pvalue", level
    return fallback


def flip_labels_with_info(prob: Volume3D, p: Volume3D, alpha: float
                          ) -> tuple[Volume3D, FlipDecision]:
    if prob.dims != p.dims:
        raise ValueError("probability and p-value volumes must share dims")
    ref, ref_kind, ref_level = _reference_set(p, alpha)
    keep = lis_threshold(prob, alpha).rejected_indices()
    flipped_vol = Volume3D(dims=prob.dims, data=1.0 - prob.data,
                           mask=None if prob.mask is None else prob.mask.copy(),
                           kind="probability")
    flip = lis_threshold(flipped_vol, alpha).rejected_indices()
    d_keep, d_flip = dice(keep, ref), dice(flip, ref)
    decision = FlipDecision(flipped=d_keep < d_flip, reference=ref_kind,
                            reference_level=ref_level, reference_size=int(ref.size),
                            dice_keep=d_keep, dice_flip=d_flip)
    return (flipped_vol if decision.flipped else prob), decision


def flip_labels(prob: Volume3D, p: Volume3D, alpha: float) -> Volume3D:
    """Orient the segmentation map so class 0 tracks the null hypothesis;
    ties keep class 0."""
    return flip_labels_with_info(prob, p, alpha)[0]


@dataclass
class PipelineResult:
    outcome: TestOutcome
    lis: Volume3D
    flip: FlipDecision
    history: list[EpochRecord]


def deepfdr_pipeline_detailed(x: Volume3D, p: Volume3D, alpha: float, cfg: WnetConfig,
                              sigma_x: float = 11.0, sigma_l: float = 3.0,
                              radius: int = 3) -> PipelineResult:
    """Full pipeline: pad, build the affinity graph, train, predict, flip,
    threshold.  Errors are tagged with the stage that raised them."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if x.dims != p.dims:
        raise ValueError("statistic and p-value volumes must share dims")
    stage = "pad"
    try:
        xp = pad_to(x, cfg.padded_dims, 0.0)
        pp = pad_to(p, cfg.padded_dims, 1.0)
        stage = "graph"
        graph = build_weight_graph(xp, sigma_x, sigma_l, radius)
        stage = "build"
        model = build_wnet(cfg, Rng(split_seed(cfg.seed, 0)))
        stage = "train"
        model, history = train_wnet(model, xp, pp, graph, cfg)
        stage = "predict"
        prob = predict_prob(model, x)
        stage = "flip"
        lis_map, decision = flip_labels_with_info(prob, p, alpha)
        stage = "threshold"
        outcome = lis_threshold(lis_map, alpha, method="deepfdr")
    except Exception as e:
        raise RuntimeError(f"deepfdr pipeline failed at stage {stage!r}: {e}") from e
    return PipelineResult(outcome=outcome, lis=lis_map, flip=decision, history=history)


def deepfdr_pipeline(x: Volume3D, p: Volume3D, alpha: float, cfg: WnetConfig,
                     **graph_kwargs) -> TestOutcome:
    return deepfdr_pipeline_detailed(x, p, alpha, cfg, **graph_kwargs).outcome
