from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    exp_avg: list[np.ndarray]
    exp_avg_sq: list[np.ndarray]
    step: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> OptimizerState:
        return cls(
            exp_avg=[np.zeros_like(p.data) for p in params],
            exp_avg_sq=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState, lr: float) -> None:
    """One AdamW update, in place on ``params`` and ``state``.

    Weight decay is decoupled: the parameter is scaled by ``1 - lr * wd``
    before the bias-corrected Adam step. A ``None`` gradient counts as zero.
    """
    if lr < 0:
        raise ValueError(f"adamw_step: lr must be non-negative, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise ValueError("adamw_step: params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != parameter shape {p.shape} ({p.name or i})")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {p.name or i}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class AdamW:
    """Stateful wrapper that reads ``.grad`` from its parameters."""

    params: list[Tensor]
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    state: OptimizerState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = OptimizerState.for_params(
            self.params, weight_decay=self.weight_decay, beta1=self.betas[0], beta2=self.betas[1], eps=self.eps
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.state.step)}
        for i, (m, v) in enumerate(zip(self.state.exp_avg, self.state.exp_avg_sq)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays) -> None:
        self.state.step = int(arrays["step"])
        for i in range(len(self.params)):
            self.state.exp_avg[i] = np.array(arrays[f"m{i}"], dtype=np.float64)
            self.state.exp_avg_sq[i] = np.array(arrays[f"v{i}"], dtype=np.float64)


def cosine_lr(step: int, total: int, base: float, warmup: int = 0) -> float:
    """Linear warmup from 0 to ``base`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if warmup < 0 or warmup >= total:
        raise ValueError(f"cosine_lr: need 0 <= warmup < total, got warmup={warmup}, total={total}")
    if step < 0 or step > total:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total}]")
    if step < warmup:
        return base * step / warmup
    progress = (step - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))
