"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays with up to five axes ordered
(batch, channel, x, y, z).  Each non-leaf tensor records its parents and a
closure producing parent gradients from its own output gradient; calling
:func:`backward` on a scalar loss walks the graph in reverse topological
order with transient gradient storage and accumulates the results into the
``grad`` field of requiring leaves.  Repeated backward passes therefore add
up exactly, and intermediate nodes never retain gradients.

All kernels fix their accumulation order (plain numpy reductions), so
identical inputs give bit-identical results run to run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .rng import Rng


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small arithmetic surface; the network layers below carry the real load.
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bwd(g):
            return g, g

        return Tensor(self.data + other.data, parents=(self, other), backward=bwd, op="add")

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bwd(g):
            return g, -g

        return Tensor(self.data - other.data, parents=(self, other), backward=bwd, op="sub")

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bwd(g):
            return g * other.data, g * self.data

        return Tensor(self.data * other.data, parents=(self, other), backward=bwd, op="mul")


def tensor_sum(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return Tensor(x.data.sum(), parents=(x,), backward=bwd, op="sum")


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requiring leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# Convolution family
# ---------------------------------------------------------------------------

def _pad_spatial(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _corr3d(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Cross-correlation: x (B,Cin,X,Y,Z), w (Cout,Cin,kx,ky,kz)."""
    v = sliding_window_view(_pad_spatial(x, pad), w.shape[2:], axis=(2, 3, 4))
    y = np.tensordot(v, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """3D cross-correlation with zero padding, stride 1."""
    xd, wd = x.data, weight.data
    if xd.ndim != 5 or wd.ndim != 5 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv3d shape mismatch: input {xd.shape}, weight {wd.shape}")
    if bias.data.shape != (wd.shape[0],):
        raise ValueError("conv3d bias shape mismatch")
    out = _corr3d(xd, wd, padding) + bias.data[None, :, None, None, None]

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            wf = wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            gx = _corr3d(g, wf, wd.shape[2] - 1 - padding)
        if weight.requires_grad:
            v = sliding_window_view(_pad_spatial(xd, padding), wd.shape[2:], axis=(2, 3, 4))
            gw = np.tensordot(g, v, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return Tensor(out, parents=(x, weight, bias), backward=bwd, op="conv3d")


def _depthwise_corr(x: np.ndarray, k: np.ndarray, pad: int) -> np.ndarray:
    """Per-channel correlation: x (B,C,X,Y,Z), k (C,kx,ky,kz)."""
    v = sliding_window_view(_pad_spatial(x, pad), k.shape[1:], axis=(2, 3, 4))
    return np.einsum("bcxyzijk,cijk->bcxyz", v, k, optimize=True)


def depthwise_conv3d(x: Tensor, weight: Tensor, padding: int = 1) -> Tensor:
    """Per-channel 3D correlation; weight (C, 1, kx, ky, kz)."""
    xd, wd = x.data, weight.data
    if wd.ndim != 5 or wd.shape[1] != 1 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"depthwise_conv3d shape mismatch: input {xd.shape}, weight {wd.shape}")
    k = wd[:, 0]
    out = _depthwise_corr(xd, k, padding)

    def bwd(g):
        gx = gw = None
        if x.requires_grad:
            gx = _depthwise_corr(g, k[:, ::-1, ::-1, ::-1], k.shape[1] - 1 - padding)
        if weight.requires_grad:
            v = sliding_window_view(_pad_spatial(xd, padding), k.shape[1:], axis=(2, 3, 4))
            gw = np.einsum("bcxyzijk,bcxyz->cijk", v, g, optimize=True)[:, None]
        return gx, gw

    return Tensor(out, parents=(x, weight), backward=bwd, op="depthwise_conv3d")


def pointwise_conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """1x1x1 channel-mixing convolution; weight (Cout, Cin, 1, 1, 1)."""
    xd = x.data
    wk = weight.data[:, :, 0, 0, 0]
    if wk.shape[1] != xd.shape[1]:
        raise ValueError(f"pointwise_conv3d shape mismatch: input {xd.shape}, weight {weight.data.shape}")
    if bias.data.shape != (wk.shape[0],):
        raise ValueError("pointwise_conv3d bias shape mismatch")
    out = np.einsum("bcxyz,oc->boxyz", xd, wk, optimize=True) + bias.data[None, :, None, None, None]

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.einsum("boxyz,oc->bcxyz", g, wk, optimize=True)
        if weight.requires_grad:
            gw = np.einsum("boxyz,bcxyz->oc", g, xd, optimize=True)[:, :, None, None, None]
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return Tensor(out, parents=(x, weight, bias), backward=bwd, op="pointwise_conv3d")


def depthwise_separable_conv3d(x: Tensor, depthwise_weight: Tensor, pointwise_weight: Tensor,
                               bias: Tensor, padding: int = 1) -> Tensor:
    """Per-channel 3x3x3 correlation followed by 1x1x1 channel mixing."""
    return pointwise_conv3d(depthwise_conv3d(x, depthwise_weight, padding), pointwise_weight, bias)


def maxpool3d(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2x2 max pooling with stride 2.

    Gradient routes to the argmax position; ties go to the lowest linear
    index within the window (first occurrence in (x, y, z) order).
    """
    B, C, X, Y, Z = x.data.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"maxpool3d requires even spatial dims, got {(X, Y, Z)}")
    win = (x.data.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2)
           .transpose(0, 1, 2, 4, 6, 3, 5, 7)
           .reshape(B, C, X // 2, Y // 2, Z // 2, 8))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(B, C, X // 2, Y // 2, Z // 2, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(B, C, X, Y, Z))
        return (gx,)

    return Tensor(out, parents=(x,), backward=bwd, op="maxpool3d"), idx


def transposed_conv3d(x: Tensor, weight: Tensor) -> Tensor:
    """Fractionally-strided convolution, kernel 2, stride 2 (disjoint blocks).

    weight (Cin, Cout, 2, 2, 2); output doubles each spatial axis.
    """
    xd, wd = x.data, weight.data
    if wd.ndim != 5 or xd.shape[1] != wd.shape[0] or wd.shape[2:] != (2, 2, 2):
        raise ValueError(f"transposed_conv3d shape mismatch: input {xd.shape}, weight {wd.shape}")
    B, Cin, X, Y, Z = xd.shape
    Cout = wd.shape[1]
    blocks = np.einsum("bcxyz,cdijk->bdxiyjzk", xd, wd, optimize=True)
    out = blocks.reshape(B, Cout, 2 * X, 2 * Y, 2 * Z)

    def bwd(g):
        gb = g.reshape(B, Cout, X, 2, Y, 2, Z, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        gx = gw = None
        if x.requires_grad:
            gx = np.einsum("bdxyzijk,cdijk->bcxyz", gb, wd, optimize=True)
        if weight.requires_grad:
            gw = np.einsum("bcxyz,bdxyzijk->cdijk", xd, gb, optimize=True)
        return gx, gw

    return Tensor(out, parents=(x, weight), backward=bwd, op="transposed_conv3d")


# ---------------------------------------------------------------------------
# Elementwise, normalization, structural ops
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        return (g * (x.data > 0.0),)

    return Tensor(out, parents=(x,), backward=bwd, op="relu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, parents=(x,), backward=bwd, op="sigmoid")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    batches_tracked: int = 0

    @classmethod
    def for_channels(cls, c: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(c), np.ones(c), momentum, eps)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str) -> Tensor:
    """Per-channel normalization over (batch, x, y, z).

    Train mode normalizes with batch statistics (biased variance) and updates
    the running stats in place; eval mode normalizes with running stats.
    """
    xd = x.data
    C = xd.shape[1]
    gma = gamma.data.reshape(1, C, 1, 1, 1)
    if mode == "train":
        axes = (0, 2, 3, 4)
        n = xd.size // C
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mean.reshape(1, C, 1, 1, 1)) * inv.reshape(1, C, 1, 1, 1)
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var
        state.batches_tracked += 1
        out = gma * xhat + beta.data.reshape(1, C, 1, 1, 1)

        def bwd(g):
            gxhat = g * gma
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                s1 = gxhat.sum(axis=axes).reshape(1, C, 1, 1, 1)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(1, C, 1, 1, 1)
                gx = inv.reshape(1, C, 1, 1, 1) * (gxhat - s1 / n - xhat * s2 / n)
            return gx, ggamma, gbeta

        return Tensor(out, parents=(x, gamma, beta), backward=bwd, op="batchnorm3d")
    if mode == "eval":
        if state.batches_tracked == 0:
            raise RuntimeError("batchnorm3d eval mode before any train step")
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(1, C, 1, 1, 1)
        xhat = (xd - state.running_mean.reshape(1, C, 1, 1, 1)) * inv
        out = gma * xhat + beta.data.reshape(1, C, 1, 1, 1)

        def bwd(g):
            axes = (0, 2, 3, 4)
            gx = g * gma * inv if x.requires_grad else None
            ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gbeta = g.sum(axis=axes) if beta.requires_grad else None
            return gx, ggamma, gbeta

        return Tensor(out, parents=(x, gamma, beta), backward=bwd, op="batchnorm3d")
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def dropout(x: Tensor, rate: float, mode: str, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs a generator")
    u = rng.block_uniforms(x.data.size).reshape(x.data.shape)
    scale = (u >= rate) / (1.0 - rate)

    def bwd(g):
        return (g * scale,)

    return Tensor(x.data * scale, parents=(x,), backward=bwd, op="dropout")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError("concat_channels requires matching batch/spatial shapes")
    ca = a.data.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return Tensor(np.concatenate([a.data, b.data], axis=1), parents=(a, b),
                  backward=bwd, op="concat_channels")


def take_flat(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather flat-indexed elements of x into a vector; scatter-add on backward."""
    flat = x.data.reshape(-1)
    out = flat[indices]

    def bwd(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, indices, g)
        return (gx.reshape(x.data.shape),)

    return Tensor(out, parents=(x,), backward=bwd, op="take_flat")


def mse_scalar(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all elements of ``pred``.

    Masked losses are formed by gathering masked voxels (take_flat) first,
    so ``pred`` here already carries exactly the voxels that count.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.data.shape:
        raise ValueError("mse_scalar shape mismatch")
    diff = pred.data - target
    n = diff.size

    def bwd(g):
        return (g * 2.0 * diff / n,)

    return Tensor(np.mean(diff * diff), parents=(pred,), backward=bwd, op="mse_scalar")


# ---------------------------------------------------------------------------
# Parameters, optimizer, initialization, checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


class Parameter:
    """Named trainable leaf with a momentum buffer."""

    __slots__ = ("name", "tensor", "trainable", "velocity")

    def __init__(self, name: str, tensor: Tensor, trainable: bool = True):
        if tensor._parents:
            raise ValueError("parameters must be leaf tensors")
        tensor.requires_grad = trainable
        self.name = name
        self.tensor = tensor
        self.trainable = trainable
        self.velocity = np.zeros_like(tensor.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


def sgd_step(params, cfg: OptimizerConfig) -> None:
    """v <- momentum*v + (grad + wd*theta); theta <- theta - lr*v."""
    for p in params:
        if not p.trainable or p.tensor.grad is None:
            continue
        g = p.tensor.grad + cfg.weight_decay * p.tensor.data
        p.velocity = cfg.momentum * p.velocity + g
        p.tensor.data = p.tensor.data - cfg.learning_rate * p.velocity


def zero_grads(params) -> None:
    for p in params:
        p.tensor.zero_grad()


def kaiming_init(shape, fan_in: int, rng: Rng) -> Tensor:
    """Leaf tensor with entries i.i.d. N(0, 2/fan_in)."""
    n = int(np.prod(shape))
    std = np.sqrt(2.0 / fan_in)
    data = (std * rng.block_normals(n)).reshape(shape)
    return Tensor(data, requires_grad=True, op="leaf")


def save_checkpoint(entries, path: str | Path) -> None:
    """Write named arrays as a raw f64le payload plus a JSON manifest.

    ``entries`` is an iterable of (name, ndarray); order is preserved and
    offsets are in bytes.
    """
    path = Path(path)
    manifest = []
    chunks = []
    offset = 0
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.astype("<f8").tobytes()
        chunks.append(raw)
        offset += len(raw)
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(manifest) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    raw = path.read_bytes()
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw[start: start + 8 * n], dtype="<f8").reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
    return out
