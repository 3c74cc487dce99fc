"""Adam and AdamW on a flat parameter vector."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np


class OptimizerKind(str, Enum):
    ADAM = "adam"
    ADAMW = "adamw"


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; the state is advanced in place."""
    if state.m.shape != params.shape or grads.shape != params.shape:
        raise ValueError(
            f"Shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
               weight_decay: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> np.ndarray:
    """Adam plus decoupled weight decay -lr * weight_decay * p."""
    updated = adam_step(params, grads, state, lr, beta1, beta2, eps)
    return updated - lr * weight_decay * params


@dataclass
class Optimizer:
    """Stateful wrapper used by the training loop."""

    kind: OptimizerKind
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: Optional[AdamState] = field(default=None, repr=False)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        if OptimizerKind(self.kind) == OptimizerKind.ADAMW:
            return adamw_step(params, grads, self.state, self.lr, self.weight_decay,
                              self.beta1, self.beta2, self.eps)
        return adam_step(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
