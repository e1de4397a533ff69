"""AdamW, plain SGD and the L1 subgradient used by every fitting loop."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(grads, what="gradient"):
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError(f"non-finite {what}")


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass(frozen=True, eq=False)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    hp: AdamWConfig = field(default_factory=AdamWConfig)

    @classmethod
    def zeros_like(cls, params, hp: AdamWConfig | None = None) -> "OptimizerState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0,
                   hp or AdamWConfig())


def adamw_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState):
    """Bias-corrected Adam with decoupled weight decay. Returns (params', state')."""
    _check_finite(grads)
    hp = state.hp
    b1, b2 = hp.betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params
    if hp.weight_decay > 0:
        new = new - hp.lr * hp.weight_decay * params
    new = new - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
    return new, replace(state, m=m, v=v, step=t)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    _check_finite(grads)
    return params - lr * grads


def l1_loss(pred, target, reduction: str = "mean") -> float:
    d = np.abs(np.asarray(pred) - np.asarray(target))
    return float(d.mean() if reduction == "mean" else d.sum())


def l1_grad(pred, target, reduction: str = "mean") -> np.ndarray:
    """Subgradient of the L1 loss: sign(pred - target), zero at exact ties."""
    g = np.sign(np.asarray(pred, dtype=np.float64) - target)
    if reduction == "mean":
        g /= g.size
    return g
