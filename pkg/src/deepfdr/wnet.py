"""Two cascaded 3-level U-nets trained by alternating partition and
reconstruction objectives.

The first U-net maps the statistic volume to a per-voxel class-0 probability
map; the second reconstructs the p-value volume from that map.  Per epoch the
trainer first updates only the segmenter's parameters on the soft
normalized-cut loss, then updates both networks on the masked reconstruction
MSE.  Layout per U-net: a regular 3x3x3 conv pair at the top level,
depthwise-separable conv pairs at the middle and bottom levels, 2x2x2 max
pooling / transposed-conv resampling between levels, dropout before the
second pooling, skip concatenations, and a 1x1x1 conv + sigmoid head.  Every
3x3x3 conv layer is followed by ReLU then batch normalization.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import (BatchNormState, OptimizerConfig, Parameter, Tensor, backward,
                       batchnorm3d, concat_channels, conv3d, depthwise_separable_conv3d,
                       dropout, kaiming_init, maxpool3d, mse_scalar, pointwise_conv3d,
                       relu, sgd_step, sigmoid, take_flat, transposed_conv3d, zero_grads)
from .ncut import SparseWeightGraph, soft_ncut_loss
from .rng import Rng, split_seed
from .volume import Volume3D, crop_to, pad_to

PAPER_CHANNELS = (64, 128, 256)
DESK_CHANNELS = (8, 16, 32)


class TrainingDivergedError(RuntimeError):
    def __init__(self, stage: str, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch} ({stage}): {detail}")
        self.stage = stage
        self.epoch = epoch


@dataclass(frozen=True)
class WnetConfig:
    channels: tuple[int, int, int] = DESK_CHANNELS
    padded_dims: tuple[int, int, int] = (32, 32, 32)
    dropout_rate: float = 0.5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    max_epochs: int = 25
    patience: int = 3
    min_rel_improvement: float = 1e-4
    seed: int = 0
    levels: int = 3

    def __post_init__(self):
        if self.levels != 3:
            raise ValueError("only the 3-level layout is supported")
        if len(self.channels) != 3 or not (self.channels[0] < self.channels[1] < self.channels[2]):
            raise ValueError("channels must be three strictly increasing positive integers")
        if any(c <= 0 for c in self.channels):
            raise ValueError("channels must be positive")
        if any(d % 4 != 0 or d <= 0 for d in self.padded_dims):
            raise ValueError("padded dims must be positive and divisible by 4 (two poolings)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.lr <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("lr, max_epochs and patience must be positive")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(learning_rate=self.lr, momentum=self.momentum,
                               weight_decay=self.weight_decay)


@dataclass
class EpochRecord:
    epoch: int
    ncut_loss: float
    recon_loss: float
    wall_ms: float


class _ConvUnit:
    """Regular 3x3x3 conv -> ReLU -> batch norm."""

    separable = False

    def __init__(self, name: str, cin: int, cout: int, rng: Rng):
        self.weight = Parameter(f"{name}.weight", kaiming_init((cout, cin, 3, 3, 3), cin * 27, rng))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(cout), requires_grad=True))
        self.gamma = Parameter(f"{name}.bn.gamma", Tensor(np.ones(cout), requires_grad=True))
        self.beta = Parameter(f"{name}.bn.beta", Tensor(np.zeros(cout), requires_grad=True))
        self.bn_state = BatchNormState.for_channels(cout)
        self.name = name

    def params(self):
        return [self.weight, self.bias, self.gamma, self.beta]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        y = conv3d(x, self.weight.tensor, self.bias.tensor, padding=1)
        return batchnorm3d(relu(y), self.gamma.tensor, self.beta.tensor, self.bn_state, mode)


class _SepConvUnit:
    """Depthwise 3x3x3 + pointwise 1x1x1 -> ReLU -> batch norm."""

    separable = True

    def __init__(self, name: str, cin: int, cout: int, rng: Rng):
        self.dw = Parameter(f"{name}.dw", kaiming_init((cin, 1, 3, 3, 3), 27, rng))
        self.pw = Parameter(f"{name}.pw", kaiming_init((cout, cin, 1, 1, 1), cin, rng))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(cout), requires_grad=True))
        self.gamma = Parameter(f"{name}.bn.gamma", Tensor(np.ones(cout), requires_grad=True))
        self.beta = Parameter(f"{name}.bn.beta", Tensor(np.zeros(cout), requires_grad=True))
        self.bn_state = BatchNormState.for_channels(cout)
        self.name = name

    def params(self):
        return [self.dw, self.pw, self.bias, self.gamma, self.beta]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        y = depthwise_separable_conv3d(x, self.dw.tensor, self.pw.tensor, self.bias.tensor)
        return batchnorm3d(relu(y), self.gamma.tensor, self.beta.tensor, self.bn_state, mode)


class _ConvPair:
    """Two consecutive conv units of the same kind."""

    def __init__(self, name: str, cin: int, cout: int, rng: Rng, separable: bool):
        unit = _SepConvUnit if separable else _ConvUnit
        self.first = unit(f"{name}.0", cin, cout, rng)
        self.second = unit(f"{name}.1", cout, cout, rng)

    def params(self):
        return self.first.params() + self.second.params()

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return self.second.forward(self.first.forward(x, mode), mode)


class _UNet3d:
    """One 3-level U-net with a sigmoid head producing a single channel."""

    def __init__(self, name: str, cin: int, channels: tuple[int, int, int],
                 dropout_rate: float, rng: Rng):
        c0, c1, c2 = channels
        self.dropout_rate = dropout_rate
        self.enc0 = _ConvPair(f"{name}.enc0", cin, c0, rng, separable=False)
        self.enc1 = _ConvPair(f"{name}.enc1", c0, c1, rng, separable=True)
        self.bottom = _ConvPair(f"{name}.bottom", c1, c2, rng, separable=True)
        self.up1 = Parameter(f"{name}.up1.weight", kaiming_init((c2, c1, 2, 2, 2), c2 * 8, rng))
        self.dec1 = _ConvPair(f"{name}.dec1", 2 * c1, c1, rng, separable=True)
        self.up0 = Parameter(f"{name}.up0.weight", kaiming_init((c1, c0, 2, 2, 2), c1 * 8, rng))
        self.dec0 = _ConvPair(f"{name}.dec0", 2 * c0, c0, rng, separable=False)
        self.head_w = Parameter(f"{name}.head.weight", kaiming_init((1, c0, 1, 1, 1), c0, rng))
        self.head_b = Parameter(f"{name}.head.bias", Tensor(np.zeros(1), requires_grad=True))
        self.name = name

    def conv_pairs(self):
        return [self.enc0, self.enc1, self.bottom, self.dec1, self.dec0]

    def params(self):
        out = []
        for pair in (self.enc0, self.enc1, self.bottom):
            out += pair.params()
        out.append(self.up1)
        out += self.dec1.params()
        out.append(self.up0)
        out += self.dec0.params()
        out += [self.head_w, self.head_b]
        return out

    def bn_states(self):
        states = []
        for pair in self.conv_pairs():
            states += [(f"{pair.first.name}.bn", pair.first.bn_state),
                       (f"{pair.second.name}.bn", pair.second.bn_state)]
        return states

    def forward(self, x: Tensor, mode: str, rng: Rng | None = None) -> Tensor:
        e0 = self.enc0.forward(x, mode)
        e1 = self.enc1.forward(maxpool3d(e0)[0], mode)
        # dropout sits before the second max-pooling; the skip taps e1 itself
        dropped = dropout(e1, self.dropout_rate, mode, rng)
        b = self.bottom.forward(maxpool3d(dropped)[0], mode)
        d1 = self.dec1.forward(concat_channels(transposed_conv3d(b, self.up1.tensor), e1), mode)
        d0 = self.dec0.forward(concat_channels(transposed_conv3d(d1, self.up0.tensor), e0), mode)
        return sigmoid(pointwise_conv3d(d0, self.head_w.tensor, self.head_b.tensor))


class WnetModel:
    def __init__(self, config: WnetConfig, u1: _UNet3d, u2: _UNet3d):
        self.config = config
        self.u1 = u1
        self.u2 = u2
        self.mode = "train"
        self.trained = False

    def params(self):
        return self.u1.params() + self.u2.params()

    def parameter_count(self) -> int:
        return sum(p.tensor.size for p in self.params() if p.trainable)

    def conv_pair_count(self) -> int:
        return len(self.u1.conv_pairs()) + len(self.u2.conv_pairs())

    def state_entries(self):
        """Named arrays for checkpointing: parameters plus running stats."""
        for p in self.params():
            yield p.name, p.tensor.data
        for unet in (self.u1, self.u2):
            for name, st in unet.bn_states():
                yield f"{name}.running_mean", st.running_mean
                yield f"{name}.running_var", st.running_var
                yield f"{name}.batches_tracked", np.array([float(st.batches_tracked)])

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        by_name = {p.name: p for p in self.params()}
        for name, arr in entries.items():
            if name in by_name:
                by_name[name].tensor.data = np.array(arr, dtype=np.float64)
            elif name.endswith(".running_mean") or name.endswith(".running_var") \
                    or name.endswith(".batches_tracked"):
                base, _, leafname = name.rpartition(".")
                for unet in (self.u1, self.u2):
                    for sname, st in unet.bn_states():
                        if sname == base:
                            if leafname == "batches_tracked":
                                st.batches_tracked = int(arr.reshape(-1)[0])
                            else:
                                setattr(st, leafname, np.array(arr, dtype=np.float64))
            else:
                raise KeyError(f"unknown checkpoint entry {name!r}")
        if all(st.batches_tracked > 0 for _, st in
               list(self.u1.bn_states()) + list(self.u2.bn_states())):
            self.trained = True


def parameter_count_formula(channels: tuple[int, int, int], cin: int = 1) -> int:
    """Closed-form trainable-parameter count for one U-net (see README)."""
    a, b, c = channels
    enc0 = (27 * cin * a + a) + (27 * a * a + a) + 4 * a
    enc1 = (27 * a + a * b + b) + (27 * b + b * b + b) + 4 * b
    bottom = (27 * b + b * c + c) + (27 * c + c * c + c) + 4 * c
    up1 = 8 * c * b
    dec1 = (27 * 2 * b + 2 * b * b + b) + (27 * b + b * b + b) + 4 * b
    up0 = 8 * b * a
    dec0 = (27 * 2 * a * a + a) + (27 * a * a + a) + 4 * a
    head = a + 1
    return enc0 + enc1 + bottom + up1 + dec1 + up0 + dec0 + head


def build_wnet(cfg: WnetConfig, rng: Rng | None = None) -> WnetModel:
    """Kaiming-initialized W-net; parameters drawn in fixed traversal order."""
    if rng is None:
        rng = Rng(split_seed(cfg.seed, 0))
    u1 = _UNet3d("u1", 1, cfg.channels, cfg.dropout_rate, rng)
    u2 = _UNet3d("u2", 1, cfg.channels, cfg.dropout_rate, rng)
    return WnetModel(cfg, u1, u2)


def volume_to_tensor(v: Volume3D) -> Tensor:
    """Constant (1, 1, nx, ny, nz) tensor from a volume."""
    return Tensor(v.to_grid()[None, None].copy())


def tensor_flat_indices(v: Volume3D) -> np.ndarray:
    """Flat indices of masked voxels inside the (1,1,X,Y,Z) C-order layout,
    ordered by ascending volume linear index (the graph's voxel order)."""
    nx, ny, nz = v.dims
    lin = v.masked_indices()
    ix = lin % nx
    iy = (lin // nx) % ny
    iz = lin // (nx * ny)
    return ix * (ny * nz) + iy * nz + iz


def forward_u1(model: WnetModel, x: Tensor, mode: str = "eval", rng: Rng | None = None) -> Tensor:
    if x.data.shape != (1, 1) + tuple(model.config.padded_dims):
        raise ValueError(f"expected input shape {(1, 1) + tuple(model.config.padded_dims)}, "
                         f"got {x.data.shape}")
    return model.u1.forward(x, mode, rng)


def forward_u2(model: WnetModel, prob: Tensor, mode: str = "eval", rng: Rng | None = None) -> Tensor:
    return model.u2.forward(prob, mode, rng)


def train(model: WnetModel, x: Volume3D, p: Volume3D, graph: SparseWeightGraph,
          cfg: WnetConfig | None = None, on_step=None) -> tuple[WnetModel, list[EpochRecord]]:
    """Alternating training: per epoch update the segmenter on the soft-Ncut
    loss, then both networks on the masked reconstruction loss.

    ``x`` and ``p`` are the padded statistic / p-value volumes sharing dims
    and mask; ``graph`` was built over the masked voxels of ``x``.
    ``on_step``, when given, is called as on_step(epoch, step_name) right
    after each optimizer step ("ncut" then "recon").
    """
    cfg = cfg or model.config
    if x.dims != p.dims:
        raise ValueError("statistic and p-value volumes must share dims")
    if (x.mask is None) != (p.mask is None) or (
            x.mask is not None and not np.array_equal(x.mask, p.mask)):
        raise ValueError("statistic and p-value volumes must share the mask")
    opt = cfg.optimizer()
    gather_idx = tensor_flat_indices(x)
    if gather_idx.size != graph.n:
        raise ValueError("graph was not built on this volume's mask")
    xt = volume_to_tensor(x)
    target = p.masked_values()
    drop_rng = Rng(split_seed(cfg.seed, 1))
    all_params = model.params()
    u1_params = model.u1.params()
    history: list[EpochRecord] = []
    best_ncut = best_recon = np.inf
    bad_epochs = 0
    model.mode = "train"
    with threadpool_limits(limits=1):
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            # Step A: segmenter only, partition objective.
            zero_grads(all_params)
            prob = model.u1.forward(xt, "train", drop_rng)
            ncut = soft_ncut_loss(take_flat(prob, gather_idx), graph)
            if not np.isfinite(ncut.item()):
                raise TrainingDivergedError("soft-ncut", epoch, f"loss={ncut.item()}")
            backward(ncut)
            sgd_step(u1_params, opt)
            if on_step is not None:
                on_step(epoch, "ncut")
            # Step B: both networks, reconstruction objective.
            zero_grads(all_params)
            prob = model.u1.forward(xt, "train", drop_rng)
            phat = model.u2.forward(prob, "train", drop_rng)
            recon = mse_scalar(take_flat(phat, gather_idx), target)
            if not np.isfinite(recon.item()):
                raise TrainingDivergedError("reconstruction", epoch, f"loss={recon.item()}")
            backward(recon)
            sgd_step(all_params, opt)
            if on_step is not None:
                on_step(epoch, "recon")
            wall_ms = (time.perf_counter() - t0) * 1e3
            ncut_val, recon_val = ncut.item(), recon.item()
            history.append(EpochRecord(epoch, ncut_val, recon_val, wall_ms))
            improved = False
            if ncut_val < best_ncut * (1.0 - cfg.min_rel_improvement):
                improved = True
            if recon_val < best_recon * (1.0 - cfg.min_rel_improvement):
                improved = True
            best_ncut = min(best_ncut, ncut_val)
            best_recon = min(best_recon, recon_val)
            bad_epochs = 0 if improved else bad_epochs + 1
            if bad_epochs >= cfg.patience:
                break
    model.trained = True
    model.mode = "eval"
    return model, history


def predict_prob(model: WnetModel, x: Volume3D) -> Volume3D:
    """Masked class-0 probability map at the volume's original dims.

    Pads the statistic volume, runs the segmenter with dropout disabled and
    batch norm on running statistics, then crops back.
    """
    if not model.trained:
        raise RuntimeError("predict_prob requires a trained model")
    xp = pad_to(x, model.config.padded_dims, 0.0)
    with threadpool_limits(limits=1):
        prob = model.u1.forward(volume_to_tensor(xp), "eval", None)
    grid = prob.data[0, 0]
    padded = Volume3D.from_grid(grid, xp.mask.reshape(
        xp.dims[2], xp.dims[1], xp.dims[0]).transpose(2, 1, 0), kind="probability")
    out = crop_to(padded, x.dims)
    out.mask = None if x.mask is None else x.mask.copy()
    return out
