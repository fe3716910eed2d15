"""Central finite-difference checks for every layer and a tiny fusion network.

All checks run in float64. A layer is checked through the scalar objective
``sum(forward(x) * r)`` for a fixed random ``r``, so its analytic gradient is
the layer's backward pass applied to ``r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from hippofusion import layers
from hippofusion.model import batch_loss_and_grad, build_network, one_hot
from hippofusion.models import NetworkConfig, PipelineInput
from hippofusion.seeding import stream

logger = logging.getLogger(__name__)

EPS = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = f(x)
        flat[i] = saved - eps
        down = f(x)
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _rng(seed: int, name: str) -> np.random.Generator:
    return stream(seed, sum(map(ord, name)))


def check_conv3d(seed: int) -> float:
    rng = _rng(seed, "conv3d")
    c_in, c_out, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    extent = int(rng.integers(k, 6))
    x = rng.normal(size=(2, c_in, extent, extent, extent))
    params = layers.ConvParams(rng.normal(size=(c_out, c_in, k, k, k)), rng.normal(size=c_out))
    y, cache = layers.conv3d_forward(x, params)
    r = rng.normal(size=y.shape)
    dx, dk, db = layers.conv3d_backward(r, cache)

    def objective(_):
        return float(np.sum(layers.conv3d_forward(x, params)[0] * r))

    return max(
        relative_error(dx, numeric_gradient(objective, x)),
        relative_error(dk, numeric_gradient(objective, params.kernels)),
        relative_error(db, numeric_gradient(objective, params.bias)),
    )


def check_batchnorm(seed: int) -> float:
    rng = _rng(seed, "batchnorm")
    channels = int(rng.integers(1, 5))
    x = rng.normal(size=(3, channels, 3, 3, 3))
    state = layers.BatchNormState.fresh(rng.normal(size=channels), rng.normal(size=channels))
    y, cache = layers.batchnorm_forward(x, state, "train", update_running=False)
    r = rng.normal(size=y.shape)
    dx, dgamma, dbeta = layers.batchnorm_backward(r, cache)

    def objective(_):
        return float(np.sum(layers.batchnorm_forward(x, state, "train", update_running=False)[0] * r))

    return max(
        relative_error(dx, numeric_gradient(objective, x)),
        relative_error(dgamma, numeric_gradient(objective, state.gamma)),
        relative_error(dbeta, numeric_gradient(objective, state.beta)),
    )


def check_relu(seed: int) -> float:
    rng = _rng(seed, "relu")
    x = rng.normal(size=(2, 3, 4, 4, 4))
    x[np.abs(x) < 0.01] = 0.5
    y, cache = layers.relu_forward(x)
    r = rng.normal(size=y.shape)
    dx = layers.relu_backward(r, cache)
    return relative_error(dx, numeric_gradient(lambda _: float(np.sum(layers.relu_forward(x)[0] * r)), x))


def check_maxpool3d(seed: int) -> float:
    rng = _rng(seed, "maxpool3d")
    extent = int(rng.integers(2, 7))
    x = rng.permutation(2 * 2 * extent ** 3).reshape(2, 2, extent, extent, extent).astype(np.float64) * 0.1
    y, cache = layers.maxpool3d_forward(x)
    r = rng.normal(size=y.shape)
    dx = layers.maxpool3d_backward(r, cache)
    return relative_error(dx, numeric_gradient(lambda _: float(np.sum(layers.maxpool3d_forward(x)[0] * r)), x))


def check_fully_connected(seed: int) -> float:
    rng = _rng(seed, "fully_connected")
    x, w, b = rng.normal(size=(3, 8)), rng.normal(size=(4, 8)), rng.normal(size=4)
    y, cache = layers.fully_connected_forward(x, w, b)
    r = rng.normal(size=y.shape)
    dx, dw, db = layers.fully_connected_backward(r, cache)

    def objective(_):
        return float(np.sum(layers.fully_connected_forward(x, w, b)[0] * r))

    return max(
        relative_error(dx, numeric_gradient(objective, x)),
        relative_error(dw, numeric_gradient(objective, w)),
        relative_error(db, numeric_gradient(objective, b)),
    )


def check_dropout(seed: int) -> float:
    rng = _rng(seed, "dropout")
    x = rng.normal(size=(3, 10))
    y, cache = layers.dropout_forward(x, 0.5, "train", seed=seed)
    r = rng.normal(size=y.shape)
    dx = layers.dropout_backward(r, cache)

    def objective(_):
        return float(np.sum(layers.dropout_forward(x, 0.5, "train", seed=seed)[0] * r))

    return relative_error(dx, numeric_gradient(objective, x))


def check_softmax(seed: int) -> float:
    rng = _rng(seed, "softmax")
    z = rng.normal(size=(3, 2))
    r = rng.normal(size=(3, 2))
    dz = layers.softmax_backward(layers.softmax(z), r)
    return relative_error(dz, numeric_gradient(lambda _: float(np.sum(layers.softmax(z) * r)), z))


def tiny_network_config(shared_weights: bool = False) -> NetworkConfig:
    """ROI 8, two conv layers, two pipelines; well under 5,000 parameters."""
    return NetworkConfig(
        name="custom",
        conv_kernel_sizes=[3, 3],
        conv_filter_counts=[2, 3],
        fc_units=[4],
        roi_size=8,
        dropout_rate=0.5,
        shared_weights=shared_weights,
        input_pipelines=[
            PipelineInput(modality="sMRI", roi="left_hippocampus"),
            PipelineInput(modality="sMRI", roi="right_hippocampus"),
        ],
    )


def check_network(seed: int) -> float:
    net = build_network(tiny_network_config(), init_seed=seed, precision="float64")
    rng = _rng(seed, "network")
    inputs = [rng.normal(size=(2, 1, 8, 8, 8)) for _ in range(net.n_pipelines)]
    labels = one_hot([0, 1])
    keys = [(0, 0), (0, 1)]
    analytic = batch_loss_and_grad(net, inputs, labels, dropout_seed=seed, sample_keys=keys).grad
    flat = net.get_flat()

    def objective(w):
        return batch_loss_and_grad(net, inputs, labels, dropout_seed=seed, sample_keys=keys, flat=w).loss

    numeric = numeric_gradient(objective, flat)
    return relative_error(analytic, numeric)


LAYER_CHECKS: Dict[str, Callable[[int], float]] = {
    "conv3d": check_conv3d,
    "batchnorm": check_batchnorm,
    "relu": check_relu,
    "maxpool3d": check_maxpool3d,
    "fully_connected": check_fully_connected,
    "dropout": check_dropout,
    "softmax": check_softmax,
    "network": check_network,
}


def run_suite(seeds: Sequence[int] = (0, 1, 2), tolerance: float = TOLERANCE) -> List[CheckResult]:
    results = []
    for name, check in LAYER_CHECKS.items():
        for seed in seeds:
            error = check(seed)
            results.append(CheckResult(name, seed, error, tolerance))
            logger.info(f"gradcheck {name} seed {seed}: {error:.3e}")
    return results
