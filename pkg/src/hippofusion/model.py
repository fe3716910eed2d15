"""Siamese multi-pipeline fusion network.

Each pipeline is a stack of conv → batchnorm → relu → (pool) blocks over one
ROI tensor. Flattened pipeline outputs are concatenated in pipeline order and
fed to the head: hidden FC layers with ReLU, dropout, a final FC projection
to ``num_classes`` logits, softmax.

All trainable values live in one flat vector (``FusionNetwork.params``);
layers see them through reshaped views, so gather/scatter is a plain copy.
Batch-norm running statistics are kept per pipeline, outside that vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from hippofusion.errors import ConfigError, DimensionMismatchError, LabelError, ShapeMismatchError
from hippofusion.layers import (
    BatchNormState,
    ConvParams,
    LayerCache,
    Phase,
    batchnorm_backward,
    batchnorm_forward,
    conv3d_backward,
    conv3d_forward,
    dropout_backward,
    dropout_forward,
    fully_connected_backward,
    fully_connected_forward,
    maxpool3d_backward,
    maxpool3d_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_backward,
)
from hippofusion.models import ARCHITECTURE_PRESETS, INPUT_MODES, REFERENCE_PAIRINGS, NetworkConfig, PipelineInput
from hippofusion.seeding import stream
from hippofusion.tensor import Precision, Tensor, dtype_for

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParameterLayout:
    """Named, ordered slots of the flat parameter vector."""

    def __init__(self):
        self.slots: Dict[str, ParamSlot] = {}
        self.total = 0

    def add(self, name: str, shape: Tuple[int, ...]) -> ParamSlot:
        if name in self.slots:
            return self.slots[name]
        slot = ParamSlot(name, tuple(shape), self.total)
        self.slots[name] = slot
        self.total += slot.size
        return slot

    def view(self, flat: Tensor, name: str) -> Tensor:
        slot = self.slots[name]
        return flat[slot.offset:slot.offset + slot.size].reshape(slot.shape)


def spatial_ladder(roi_size: int, n_blocks: int) -> Tuple[List[int], List[bool]]:
    """Spatial extent after each block and whether that block pools.

    A block pools only while the extent is >= 2; once a pool is skipped, all
    later blocks skip it too.
    """
    extents, pools = [], []
    extent, pooling = roi_size, True
    for _ in range(n_blocks):
        if pooling and extent >= 2:
            extent //= 2
            pools.append(True)
        else:
            pooling = False
            pools.append(False)
        extents.append(extent)
    return extents, pools


@dataclass
class FusionNetwork:
    config: NetworkConfig
    layout: ParameterLayout
    params: Tensor
    extents: List[int]
    pools: List[bool]
    # running (mean, var) per pipeline per block
    running: List[List[Tuple[Tensor, Tensor]]] = field(default_factory=list)

    @property
    def dtype(self) -> np.dtype:
        return self.params.dtype

    @property
    def n_pipelines(self) -> int:
        return len(self.config.input_pipelines)

    @property
    def n_blocks(self) -> int:
        return len(self.config.conv_kernel_sizes)

    @property
    def flatten_length(self) -> int:
        return self.config.conv_filter_counts[-1] * self.extents[-1] ** 3

    @property
    def head_input_length(self) -> int:
        return self.flatten_length * self.n_pipelines

    def _prefix(self, pipeline: int) -> str:
        return "shared" if self.config.shared_weights else f"p{pipeline}"

    def conv_params(self, pipeline: int, block: int, flat: Optional[Tensor] = None) -> ConvParams:
        flat = self.params if flat is None else flat
        prefix = f"{self._prefix(pipeline)}.conv{block}"
        return ConvParams(
            kernels=self.layout.view(flat, f"{prefix}.kernels"),
            bias=self.layout.view(flat, f"{prefix}.bias"),
        )

    def bn_state(self, pipeline: int, block: int, flat: Optional[Tensor] = None) -> BatchNormState:
        flat = self.params if flat is None else flat
        prefix = f"{self._prefix(pipeline)}.bn{block}"
        mean, var = self.running[pipeline][block]
        return BatchNormState(
            gamma=self.layout.view(flat, f"{prefix}.gamma"),
            beta=self.layout.view(flat, f"{prefix}.beta"),
            running_mean=mean,
            running_var=var,
            epsilon=self.config.bn_epsilon,
            momentum=self.config.bn_momentum,
        )

    def fc_names(self) -> List[str]:
        return [f"fc{j}" for j in range(len(self.config.fc_units))] + ["out"]

    def get_flat(self) -> Tensor:
        return self.params.copy()

    def set_flat(self, flat: Tensor) -> None:
        if flat.shape != self.params.shape:
            raise DimensionMismatchError(
                f"flat vector of length {flat.shape} for {self.params.shape} parameters",
                shape_a=flat.shape,
                shape_b=self.params.shape,
            )
        self.params[...] = flat

    def running_flat(self) -> Tensor:
        parts = [np.concatenate([m, v]) for per_pipe in self.running for m, v in per_pipe]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=self.dtype)

    def set_running_flat(self, flat: Tensor) -> None:
        offset = 0
        for per_pipe in self.running:
            for mean, var in per_pipe:
                n = mean.shape[0]
                if offset + 2 * n > flat.shape[0]:
                    raise DimensionMismatchError("running statistics vector too short", shape_a=flat.shape)
                mean[...] = flat[offset:offset + n]
                var[...] = flat[offset + n:offset + 2 * n]
                offset += 2 * n
        if offset != flat.shape[0]:
            raise DimensionMismatchError("running statistics vector too long", shape_a=flat.shape)


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_network(config: NetworkConfig, init_seed: int, precision: Precision = "float32") -> FusionNetwork:
    """Lay out parameters for ``config`` and initialize them from ``init_seed``."""
    if not config.conv_kernel_sizes:
        raise ConfigError("network needs at least one conv layer", key_path="network.conv_kernel_sizes")
    if not config.input_pipelines:
        raise ConfigError("network needs at least one input pipeline", key_path="network.input_pipelines")
    pairing = REFERENCE_PAIRINGS.get(config.name)
    if pairing is not None and config.roi_size not in pairing:
        logger.warning(f"{config.name} was not paired with ROI size {config.roi_size} in the published grid")

    extents, pools = spatial_ladder(config.roi_size, len(config.conv_kernel_sizes))
    layout = ParameterLayout()
    n_pipe = len(config.input_pipelines)
    prefixes = ["shared"] if config.shared_weights else [f"p{i}" for i in range(n_pipe)]
    for prefix in prefixes:
        c_in = 1
        for b, (k, c_out) in enumerate(zip(config.conv_kernel_sizes, config.conv_filter_counts)):
            layout.add(f"{prefix}.conv{b}.kernels", (c_out, c_in, k, k, k))
            layout.add(f"{prefix}.conv{b}.bias", (c_out,))
            layout.add(f"{prefix}.bn{b}.gamma", (c_out,))
            layout.add(f"{prefix}.bn{b}.beta", (c_out,))
            c_in = c_out

    width = config.conv_filter_counts[-1] * extents[-1] ** 3 * n_pipe
    for j, units in enumerate(config.fc_units):
        layout.add(f"fc{j}.weights", (units, width))
        layout.add(f"fc{j}.bias", (units,))
        width = units
    layout.add("out.weights", (config.num_classes, width))
    layout.add("out.bias", (config.num_classes,))

    dtype = dtype_for(precision)
    params = np.zeros(layout.total, dtype=dtype)
    for index, slot in enumerate(layout.slots.values()):
        target = layout.view(params, slot.name)
        if slot.name.endswith(".gamma"):
            target[...] = 1.0
        elif slot.name.endswith(".kernels"):
            c_out, c_in, k = slot.shape[0], slot.shape[1], slot.shape[2]
            target[...] = _glorot(stream(init_seed, index), slot.shape, c_in * k ** 3, c_out * k ** 3, dtype)
        elif slot.name.endswith(".weights"):
            fan_out, fan_in = slot.shape
            target[...] = _glorot(stream(init_seed, index), slot.shape, fan_in, fan_out, dtype)

    running = [
        [(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype)) for c in config.conv_filter_counts]
        for _ in range(n_pipe)
    ]
    net = FusionNetwork(config=config, layout=layout, params=params, extents=extents, pools=pools, running=running)
    logger.info(
        f"Built {config.name} at ROI {config.roi_size}: {n_pipe} pipelines, "
        f"ladder {[config.roi_size] + extents}, {layout.total} parameters"
    )
    return net


def build_preset(name: str, roi_size: int, input_mode: str, init_seed: int, **kwargs) -> FusionNetwork:
    precision = kwargs.pop("precision", "float32")
    if name not in ARCHITECTURE_PRESETS or input_mode not in INPUT_MODES:
        raise ConfigError(f"unknown preset {name} or input mode {input_mode}", key_path="network.name")
    return build_network(NetworkConfig.preset(name, roi_size, input_mode, **kwargs), init_seed, precision)


# Forward / backward

@dataclass
class ForwardCache:
    pipelines: List[List[Dict[str, LayerCache]]]
    hidden: List[Tuple[LayerCache, LayerCache]]
    dropout: LayerCache
    out: LayerCache
    batch: int
    single: bool


def _check_inputs(net: FusionNetwork, inputs: Sequence[Tensor]) -> Tuple[List[Tensor], int, bool]:
    pipes: List[PipelineInput] = net.config.input_pipelines
    if len(inputs) != len(pipes):
        raise ShapeMismatchError(
            f"{len(inputs)} inputs for {len(pipes)} pipelines",
            shape_a=len(inputs),
            shape_b=len(pipes),
        )
    s = net.config.roi_size
    batched, sizes, singles = [], set(), set()
    for index, (x, pipe) in enumerate(zip(inputs, pipes)):
        x = np.asarray(x, dtype=net.dtype)
        single = x.ndim == 4
        x5 = x[None] if single else x
        if x5.ndim != 5 or x5.shape[1:] != (1, s, s, s):
            raise ShapeMismatchError(
                f"pipeline {index} ({pipe.label}) expects (N,) 1x{s}x{s}x{s}, got {x.shape}",
                shape_a=x.shape,
                shape_b=(1, s, s, s),
                pipeline=index,
            )
        batched.append(x5)
        sizes.add(x5.shape[0])
        singles.add(single)
    if len(sizes) != 1 or len(singles) != 1:
        raise ShapeMismatchError("pipelines received different batch sizes", shape_a=sorted(sizes))
    return batched, sizes.pop(), singles.pop()


def forward(
    net: FusionNetwork,
    inputs: Sequence[Tensor],
    phase: Phase = "infer",
    dropout_seed: int = 0,
    sample_keys: Optional[Sequence[Sequence[int]]] = None,
    flat: Optional[Tensor] = None,
) -> Tuple[Tensor, ForwardCache]:
    """Class probabilities for one sample (``[c]``) or a batch (``N×c``)."""
    flat = net.params if flat is None else flat
    batched, n, single = _check_inputs(net, inputs)

    pipe_caches, features = [], []
    for p, x in enumerate(batched):
        caches = []
        for b in range(net.n_blocks):
            block: Dict[str, LayerCache] = {}
            x, block["conv"] = conv3d_forward(x, net.conv_params(p, b, flat))
            x, block["bn"] = batchnorm_forward(x, net.bn_state(p, b, flat), phase)
            x, block["relu"] = relu_forward(x)
            if net.pools[b]:
                x, block["pool"] = maxpool3d_forward(x)
            caches.append(block)
        pipe_caches.append(caches)
        features.append(x.reshape(n, -1))

    h = np.concatenate(features, axis=1)
    hidden = []
    for name in net.fc_names()[:-1]:
        h, fc_cache = fully_connected_forward(
            h, net.layout.view(flat, f"{name}.weights"), net.layout.view(flat, f"{name}.bias")
        )
        h, relu_cache = relu_forward(h)
        hidden.append((fc_cache, relu_cache))
    h, drop_cache = dropout_forward(h, net.config.dropout_rate, phase, dropout_seed, sample_keys)
    logits, out_cache = fully_connected_forward(
        h, net.layout.view(flat, "out.weights"), net.layout.view(flat, "out.bias")
    )
    probs = softmax(logits)
    cache = ForwardCache(pipe_caches, hidden, drop_cache, out_cache, n, single)
    return (probs[0] if single else probs), cache


def backward(net: FusionNetwork, dlogits: Tensor, cache: ForwardCache) -> Tensor:
    """Flat gradient given the gradient w.r.t. the logits (``N×c``)."""
    grad = np.zeros_like(net.params)

    def add(name: str, value: Tensor) -> None:
        net.layout.view(grad, name)[...] += value

    dh, dw, db = fully_connected_backward(dlogits, cache.out)
    add("out.weights", dw)
    add("out.bias", db)
    dh = dropout_backward(dh, cache.dropout)
    for name, (fc_cache, relu_cache) in zip(reversed(net.fc_names()[:-1]), reversed(cache.hidden)):
        dh = relu_backward(dh, relu_cache)
        dh, dw, db = fully_connected_backward(dh, fc_cache)
        add(f"{name}.weights", dw)
        add(f"{name}.bias", db)

    e = net.extents[-1]
    c_last = net.config.conv_filter_counts[-1]
    width = net.flatten_length
    for p, caches in enumerate(cache.pipelines):
        dx = dh[:, p * width:(p + 1) * width].reshape(cache.batch, c_last, e, e, e)
        prefix = net._prefix(p)
        for b in reversed(range(net.n_blocks)):
            block = caches[b]
            if "pool" in block:
                dx = maxpool3d_backward(dx, block["pool"])
            dx = relu_backward(dx, block["relu"])
            dx, dgamma, dbeta = batchnorm_backward(dx, block["bn"])
            add(f"{prefix}.bn{b}.gamma", dgamma)
            add(f"{prefix}.bn{b}.beta", dbeta)
            dx, dk, dbias = conv3d_backward(dx, block["conv"])
            add(f"{prefix}.conv{b}.kernels", dk)
            add(f"{prefix}.conv{b}.bias", dbias)
    return grad


class LossResult(NamedTuple):
    loss: float
    grad: Tensor
    probs: Tensor


def check_one_hot(labels: Tensor, num_classes: int) -> Tensor:
    y = np.asarray(labels)
    if y.ndim != 2 or y.shape[1] != num_classes:
        raise LabelError(f"labels must be N×{num_classes} one-hot, got shape {y.shape}", shape=y.shape)
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise LabelError("labels are not one-hot")
    return y


def one_hot(indices: Sequence[int], num_classes: int = 2) -> Tensor:
    y = np.zeros((len(indices), num_classes))
    y[np.arange(len(indices)), np.asarray(indices, dtype=int)] = 1.0
    return y


def euclidean_loss(probs: Tensor, labels: Tensor) -> float:
    """Mean over samples of ½‖p − y‖²."""
    return float(0.5 * np.sum((probs - labels) ** 2) / probs.shape[0])


def batch_loss_and_grad(
    net: FusionNetwork,
    inputs: Sequence[Tensor],
    labels: Tensor,
    dropout_seed: int = 0,
    sample_keys: Optional[Sequence[Sequence[int]]] = None,
    flat: Optional[Tensor] = None,
    phase: Phase = "train",
) -> LossResult:
    y = check_one_hot(labels, net.config.num_classes)
    probs, cache = forward(net, inputs, phase, dropout_seed, sample_keys, flat)
    if cache.single:
        probs = probs[None]
    if y.shape[0] != probs.shape[0]:
        raise LabelError(f"{y.shape[0]} labels for {probs.shape[0]} samples")
    y = y.astype(probs.dtype)
    loss = euclidean_loss(probs, y)
    dprobs = (probs - y) / probs.shape[0]
    grad = backward(net, softmax_backward(probs, dprobs), cache)
    return LossResult(loss, grad, probs)


def loss_and_grad(
    net: FusionNetwork,
    inputs: Sequence[Tensor],
    labels: Tensor,
    dropout_seed: int = 0,
    sample_keys: Optional[Sequence[Sequence[int]]] = None,
) -> Tuple[float, Tensor]:
    result = batch_loss_and_grad(net, inputs, labels, dropout_seed, sample_keys)
    return result.loss, result.grad


def predict(net: FusionNetwork, inputs: Sequence[Tensor]) -> np.ndarray:
    """Argmax class of the infer-phase output; ties go to the lower index."""
    probs, _ = forward(net, inputs, "infer")
    return np.argmax(probs, axis=-1)
