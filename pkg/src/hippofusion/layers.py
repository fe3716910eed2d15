"""Forward and backward passes of the convolutional block and the head layers.

Block layers take batched tensors ``N×C×D×H×W`` (a single ``C×D×H×W`` sample
is accepted and returned unbatched). Every ``*_forward`` returns the output
and a ``LayerCache``; the matching ``*_backward`` consumes that cache once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hippofusion.errors import (
    BatchSizeError,
    ChannelMismatchError,
    DimensionMismatchError,
    DropoutRateError,
    HippoFusionError,
    PoolingExtentError,
)
from hippofusion.seeding import stream
from hippofusion.tensor import Tensor, matmul

Phase = Literal["train", "infer"]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
DROPOUT_RATE = 0.5


@dataclass
class ConvParams:
    """Kernels ``C_out×C_in×k×k×k`` and bias ``C_out``."""

    kernels: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.kernels.ndim != 5:
            raise DimensionMismatchError(
                f"kernels must be 5-D, got {self.kernels.shape}", shape_a=self.kernels.shape
            )
        c_out, c_in, kd, kh, kw = self.kernels.shape
        if not (kd == kh == kw) or kd < 1 or c_out < 1 or c_in < 1:
            raise DimensionMismatchError(
                f"kernels must be cubic with positive extents, got {self.kernels.shape}",
                shape_a=self.kernels.shape,
            )
        if self.bias.shape != (c_out,):
            raise DimensionMismatchError(
                f"bias length {self.bias.shape} does not match {c_out} output channels",
                shape_a=self.bias.shape,
                shape_b=(c_out,),
            )

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        n = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == n):
            raise DimensionMismatchError(
                "batch-norm vectors must share one length",
                shape_a=self.gamma.shape,
                shape_b=self.beta.shape,
            )
        if self.epsilon <= 0:
            raise ValueError("batch-norm epsilon must be positive")

    @classmethod
    def fresh(cls, gamma: Tensor, beta: Tensor, **kwargs) -> "BatchNormState":
        return cls(
            gamma=gamma,
            beta=beta,
            running_mean=np.zeros_like(gamma),
            running_var=np.ones_like(gamma),
            **kwargs,
        )


@dataclass
class LayerCache:
    """Values saved by a forward pass for its backward pass."""

    kind: str
    saved: Dict[str, Any] = field(default_factory=dict)
    consumed: bool = False

    def consume(self, kind: str) -> Dict[str, Any]:
        if self.kind != kind:
            raise HippoFusionError(f"{kind} backward given a {self.kind} cache", expected=kind, got=self.kind)
        if self.consumed:
            raise HippoFusionError(f"{kind} cache already consumed by a backward call", kind=kind)
        self.consumed = True
        return self.saved


def _batched(x: Tensor, rank: int) -> Tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionMismatchError(f"expected rank {rank - 1} or {rank}, got {x.shape}", shape_a=x.shape)
    return x, False


def same_padding(k: int) -> Tuple[int, int]:
    """Zero padding (before, after) that keeps extents under stride 1."""
    before = (k - 1) // 2
    return before, k - 1 - before


# 3D convolution

def conv3d_forward(x: Tensor, params: ConvParams) -> Tuple[Tensor, LayerCache]:
    x5, single = _batched(x, 5)
    if x5.shape[1] != params.in_channels:
        raise ChannelMismatchError(
            f"conv3d input has {x5.shape[1]} channels, kernels expect {params.in_channels}",
            shape_a=x5.shape,
            shape_b=params.kernels.shape,
        )
    k = params.kernel_size
    before, after = same_padding(k)
    pad = ((0, 0), (0, 0), (before, after), (before, after), (before, after))
    xp = np.pad(x5, pad)
    windows = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    y = np.tensordot(windows, params.kernels, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    y = np.moveaxis(y, -1, 1) + params.bias[None, :, None, None, None]
    y = np.ascontiguousarray(y, dtype=x5.dtype)
    cache = LayerCache("conv3d", {"xp": xp, "params": params, "spatial": x5.shape[2:], "single": single})
    return (y[0] if single else y), cache


def conv3d_backward(dy: Tensor, cache: LayerCache) -> Tuple[Tensor, Tensor, Tensor]:
    """Return gradients w.r.t. input, kernels and bias."""
    saved = cache.consume("conv3d")
    xp, params = saved["xp"], saved["params"]
    dy5, _ = _batched(dy, 5)
    k = params.kernel_size
    before, _ = same_padding(k)
    d, h, w = saved["spatial"]

    db = dy5.sum(axis=(0, 2, 3, 4))
    windows = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    dk = np.tensordot(dy5, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))

    full = ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1), (k - 1, k - 1))
    dy_windows = sliding_window_view(np.pad(dy5, full), (k, k, k), axis=(2, 3, 4))
    flipped = params.kernels[:, :, ::-1, ::-1, ::-1]
    dxp = np.tensordot(dy_windows, flipped, axes=([1, 5, 6, 7], [0, 2, 3, 4]))
    dxp = np.moveaxis(dxp, -1, 1)
    dx = np.ascontiguousarray(dxp[:, :, before:before + d, before:before + h, before:before + w])
    if saved["single"]:
        dx = dx[0]
    return dx, np.ascontiguousarray(dk), db


# Batch normalization

def _channel_axes(x: Tensor) -> Tuple[int, ...]:
    return tuple(a for a in range(x.ndim) if a != 1)


def batchnorm_forward(
    x: Tensor,
    state: BatchNormState,
    phase: Phase = "train",
    update_running: bool = True,
) -> Tuple[Tensor, LayerCache]:
    """Normalize per channel (axis 1) over batch and spatial positions."""
    if x.ndim < 2 or x.shape[1] != state.gamma.shape[0]:
        raise ChannelMismatchError(
            f"batchnorm input {x.shape} does not match {state.gamma.shape[0]} channels",
            shape_a=x.shape,
            shape_b=state.gamma.shape,
        )
    axes = _channel_axes(x)
    bshape = [1] * x.ndim
    bshape[1] = -1
    if phase == "train":
        if x.shape[0] < 2:
            raise BatchSizeError("batchnorm train phase needs a batch of at least 2", batch_size=x.shape[0])
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            m = state.momentum
            state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
            state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = state.gamma.reshape(bshape) * xhat + state.beta.reshape(bshape)
    count = x.size // x.shape[1]
    cache = LayerCache(
        "batchnorm",
        {"xhat": xhat, "inv_std": inv_std, "gamma": state.gamma.copy(), "phase": phase, "count": count},
    )
    return y.astype(x.dtype, copy=False), cache


def batchnorm_backward(dy: Tensor, cache: LayerCache) -> Tuple[Tensor, Tensor, Tensor]:
    """Return gradients w.r.t. input, gamma and beta."""
    saved = cache.consume("batchnorm")
    xhat, inv_std, gamma = saved["xhat"], saved["inv_std"], saved["gamma"]
    axes = _channel_axes(dy)
    bshape = [1] * dy.ndim
    bshape[1] = -1
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    dxhat = dy * gamma.reshape(bshape)
    if saved["phase"] == "infer":
        return dxhat * inv_std.reshape(bshape), dgamma, dbeta
    m = saved["count"]
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dgamma, dbeta


# Rectifier

def relu_forward(x: Tensor) -> Tuple[Tensor, LayerCache]:
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), LayerCache("relu", {"mask": mask})


def relu_backward(dy: Tensor, cache: LayerCache) -> Tensor:
    mask = cache.consume("relu")["mask"]
    return np.where(mask, dy, dy.dtype.type(0))


# 3D max pooling, 2×2×2 windows, stride 2

def maxpool3d_forward(x: Tensor) -> Tuple[Tensor, LayerCache]:
    x5, single = _batched(x, 5)
    n, c, d, h, w = x5.shape
    if min(d, h, w) < 2:
        raise PoolingExtentError(f"maxpool3d needs spatial extents >= 2, got {(d, h, w)}", spatial=(d, h, w))
    d2, h2, w2 = d // 2, h // 2, w // 2
    blocks = (
        x5[:, :, : 2 * d2, : 2 * h2, : 2 * w2]
        .reshape(n, c, d2, 2, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d2, h2, w2, 8)
    )
    argmax = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    cache = LayerCache("maxpool3d", {"argmax": argmax, "shape": x5.shape, "single": single})
    y = np.ascontiguousarray(y)
    return (y[0] if single else y), cache


def maxpool3d_backward(dy: Tensor, cache: LayerCache) -> Tensor:
    saved = cache.consume("maxpool3d")
    argmax = saved["argmax"]
    n, c, d, h, w = saved["shape"]
    dy5, _ = _batched(dy, 5)
    d2, h2, w2 = argmax.shape[2:]
    routed = np.zeros(argmax.shape + (8,), dtype=dy5.dtype)
    np.put_along_axis(routed, argmax[..., None], dy5[..., None], axis=-1)
    routed = (
        routed.reshape(n, c, d2, h2, w2, 2, 2, 2)
        .transpose(0, 1, 2, 5, 3, 6, 4, 7)
        .reshape(n, c, 2 * d2, 2 * h2, 2 * w2)
    )
    dx = np.zeros((n, c, d, h, w), dtype=dy5.dtype)
    dx[:, :, : 2 * d2, : 2 * h2, : 2 * w2] = routed
    return dx[0] if saved["single"] else dx


# Fully-connected

def fully_connected_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tuple[Tensor, LayerCache]:
    x2, single = _batched(x, 2)
    p, n = weights.shape
    if x2.shape[1] != n or bias.shape != (p,):
        raise DimensionMismatchError(
            f"fully_connected: input {x2.shape}, weights {weights.shape}, bias {bias.shape}",
            shape_a=x2.shape,
            shape_b=weights.shape,
        )
    y = matmul(x2, weights.T) + bias[None, :]
    cache = LayerCache("fully_connected", {"x": x2, "weights": weights, "single": single})
    return (y[0] if single else y), cache


def fully_connected_backward(dy: Tensor, cache: LayerCache) -> Tuple[Tensor, Tensor, Tensor]:
    saved = cache.consume("fully_connected")
    dy2, _ = _batched(dy, 2)
    dx = matmul(dy2, saved["weights"])
    dw = matmul(dy2.T, saved["x"])
    db = dy2.sum(axis=0)
    return (dx[0] if saved["single"] else dx), dw, db


# Inverted dropout

def dropout_forward(
    x: Tensor,
    rate: float = DROPOUT_RATE,
    phase: Phase = "train",
    seed: int = 0,
    sample_keys: Optional[Sequence[Sequence[int]]] = None,
) -> Tuple[Tensor, LayerCache]:
    """Drop each element with probability ``rate`` and rescale survivors.

    Row ``i`` draws its mask from ``stream(seed, *sample_keys[i])`` so a sample's
    mask does not depend on which other samples share the batch.
    """
    if not 0.0 <= rate < 1.0:
        raise DropoutRateError(f"dropout rate must be in [0, 1), got {rate}", rate=rate)
    if phase == "infer" or rate == 0.0:
        return x, LayerCache("dropout", {"mask": None})
    x2, single = _batched(x, 2)
    keys = sample_keys if sample_keys is not None else [(i,) for i in range(x2.shape[0])]
    if len(keys) != x2.shape[0]:
        raise DimensionMismatchError(
            f"{len(keys)} dropout keys for a batch of {x2.shape[0]}",
            shape_a=x2.shape,
        )
    keep = np.stack([stream(seed, *key).random(x2.shape[1]) >= rate for key in keys])
    mask = keep.astype(x2.dtype) / x2.dtype.type(1.0 - rate)
    y = x2 * mask
    return (y[0] if single else y), LayerCache("dropout", {"mask": mask, "single": single})


def dropout_backward(dy: Tensor, cache: LayerCache) -> Tensor:
    saved = cache.consume("dropout")
    if saved["mask"] is None:
        return dy
    dy2, _ = _batched(dy, 2)
    dx = dy2 * saved["mask"]
    return dx[0] if saved["single"] else dx


# Softmax

def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if logits.shape[-1] < 2:
        raise DimensionMismatchError("softmax needs at least 2 classes", shape_a=logits.shape)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: Tensor, dprobs: Tensor) -> Tensor:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax outputs."""
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
