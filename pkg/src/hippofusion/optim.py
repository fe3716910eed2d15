"""Nesterov momentum with a decaying learning rate, and mini-group accumulation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Literal, Optional, Tuple

import numpy as np

from hippofusion.errors import AccumulatorOverflowError, DimensionMismatchError, OptimizerError
from hippofusion.models import OptimizerConfig
from hippofusion.tensor import Tensor

Schedule = Literal["staircase", "compounding"]
GradEval = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class OptimizerState:
    velocity: Tensor
    momentum: float = 0.93
    mu0: float = 0.01
    decay_rate: float = 0.8
    decay_step: int = 100
    t: int = 0
    schedule: Schedule = "staircase"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise OptimizerError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.decay_rate <= 1.0:
            raise OptimizerError(f"decay rate must be in (0, 1], got {self.decay_rate}")
        if self.decay_step < 1 or self.t < 0:
            raise OptimizerError("decay_step must be >= 1 and t >= 0")

    @classmethod
    def create(cls, n_params: int, config: Optional[OptimizerConfig] = None, dtype=np.float64) -> "OptimizerState":
        config = config or OptimizerConfig()
        return cls(
            velocity=np.zeros(n_params, dtype=dtype),
            momentum=config.momentum,
            mu0=config.mu0,
            decay_rate=config.decay_rate,
            decay_step=config.decay_step,
            schedule=config.schedule,
        )


def lr_at(state: OptimizerState, t: int) -> float:
    """Learning rate used at iteration ``t``.

    ``staircase``: mu0 * lambda ** (t // t0).
    ``compounding``: the recurrence mu_{s+1} = mu_s * lambda ** (s // t0)
    applied literally, i.e. mu0 * lambda ** sum_{s<t} (s // t0).
    """
    if t < 0:
        raise OptimizerError(f"iteration must be >= 0, got {t}")
    a, r = divmod(t, state.decay_step)
    if state.schedule == "staircase":
        exponent = a
    else:
        exponent = state.decay_step * a * (a - 1) // 2 + a * r
    return float(state.mu0 * state.decay_rate ** exponent)


def nesterov_step(params: Tensor, state: OptimizerState, grad_eval: GradEval) -> Tuple[Tensor, OptimizerState]:
    """One update with the gradient taken at the lookahead point w + m·v."""
    if params.shape != state.velocity.shape:
        raise DimensionMismatchError(
            f"parameters {params.shape} vs velocity {state.velocity.shape}",
            shape_a=params.shape,
            shape_b=state.velocity.shape,
        )
    lr = lr_at(state, state.t)
    lookahead = params + state.momentum * state.velocity
    grad = np.asarray(grad_eval(lookahead))
    if grad.shape != params.shape:
        raise DimensionMismatchError(
            f"gradient {grad.shape} vs parameters {params.shape}",
            shape_a=grad.shape,
            shape_b=params.shape,
        )
    velocity = state.momentum * state.velocity - lr * grad
    new_params = (params + velocity).astype(params.dtype, copy=False)
    return new_params, replace(state, velocity=velocity, t=state.t + 1)


@dataclass
class MiniGroupAccumulator:
    """Sums per-group gradient sums until ``target_count`` samples were seen."""

    total: Tensor
    target_count: int = 90
    samples_seen: int = 0

    @classmethod
    def create(cls, n_params: int, target_count: int = 90) -> "MiniGroupAccumulator":
        if target_count < 1:
            raise OptimizerError(f"target count must be >= 1, got {target_count}")
        return cls(total=np.zeros(n_params, dtype=np.float64), target_count=target_count)

    def reset(self) -> None:
        self.total[...] = 0.0
        self.samples_seen = 0


def accumulate(acc: MiniGroupAccumulator, grad_sum: Tensor, count: int = 1) -> Optional[Tensor]:
    """Add the gradient summed over ``count`` samples.

    Returns the averaged gradient (sum / target_count) when the group is full,
    after resetting the accumulator; otherwise None.
    """
    if grad_sum.shape != acc.total.shape:
        raise DimensionMismatchError(
            f"gradient {grad_sum.shape} vs accumulator {acc.total.shape}",
            shape_a=grad_sum.shape,
            shape_b=acc.total.shape,
        )
    if count < 1 or acc.samples_seen + count > acc.target_count:
        raise AccumulatorOverflowError(
            f"adding {count} samples to {acc.samples_seen}/{acc.target_count}",
            samples_seen=acc.samples_seen,
            target_count=acc.target_count,
        )
    acc.total += grad_sum
    acc.samples_seen += count
    if acc.samples_seen < acc.target_count:
        return None
    released = acc.total / acc.target_count
    acc.reset()
    return released
