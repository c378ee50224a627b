from __future__ import annotations

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field

from stfusion.core.entities import DimensionError
from stfusion.core.tensor import Tensor

# scan decay rates and skip gains are left undecayed along with biases and norm gains
NO_DECAY_SUFFIXES = ("A_log", "D_skip")


class AdamWConfig(BaseModel):
    lr: float = 1e-4
    weight_decay: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


class AdamState(BaseModel):
    step: int = 0
    m: dict[str, np.ndarray] = Field(default_factory=dict)
    v: dict[str, np.ndarray] = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True


def decays(name: str, p: Tensor) -> bool:
    return p.ndim >= 2 and not name.endswith(NO_DECAY_SUFFIXES)


def adamw_step(params: dict[str, Tensor], state: AdamState, cfg: AdamWConfig) -> AdamState:
    """One in-place AdamW update from the .grad of every parameter; a missing grad counts as zero."""
    beta1, beta2 = cfg.betas
    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step
    for name, p in params.items():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        if grad.shape != p.shape:
            raise DimensionError(f"Gradient of {name} has shape {grad.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"Moment buffers of {name} have shape {m.shape}, parameter {p.shape}")
        if cfg.weight_decay and decays(name, p):
            p.data *= p.data.dtype.type(1.0 - cfg.lr * cfg.weight_decay)
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        p.data -= update.astype(p.dtype)
    return state


class AdamW:
    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig | None = None, state: AdamState | None = None):
        self.params = params
        self.cfg = cfg or AdamWConfig()
        self.state = state or AdamState()
        missing = set(self.state.m) - set(params)
        if missing:
            logger.warning(f"Optimizer state has moments for unknown parameters: {sorted(missing)}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, self.state, self.cfg)
