"""Spatial false-discovery-rate control via unsupervised 3D segmentation.

A statistic volume is segmented by a two-U-net cascade trained without
labels; the segmenter's per-voxel null probabilities drive a ranked
rejection rule with guaranteed-level behavior, benchmarked against BH,
Storey q-values, and local fdr on Gaussian-mixture simulations.
"""

from .autodiff import (OptimizerConfig, Parameter, Tensor, backward, conv3d,
                       depthwise_separable_conv3d, dropout, kaiming_init, maxpool3d,
                       mse_scalar, relu, sgd_step, sigmoid, transposed_conv3d)
from .baselines import bh, local_fdr, qvalue
from .lis import (TestOutcome, deepfdr_pipeline, deepfdr_pipeline_detailed, dice,
                  flip_labels, lis_threshold)
from .ncut import SparseWeightGraph, build_weight_graph, soft_ncut_loss
from .rng import Rng, split_seed
from .sim import (SimSetting, compute_metrics, generate_labels_blobs, oracle_lis_iid,
                  run_replications, sample_statistics)
from .volume import Volume3D, crop_to, load_volume, pad_to, save_volume, z_to_pvalue
from .wnet import WnetConfig, WnetModel, build_wnet, forward_u1, forward_u2, predict_prob, train

__version__ = "0.1.0"
