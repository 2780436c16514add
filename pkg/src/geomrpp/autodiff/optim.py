"""Adam with L2 weight decay and a reduce-on-plateau learning-rate schedule."""
from __future__ import annotations

import math
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .tensor import Parameter


class Adam:
    """Adam where weight decay is added to the gradient (``g + wd * p``)."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, names: Optional[List[str]] = None):
        self.params = list(params)
        self.names = names or [p.name or f"param{k}" for k, p in enumerate(self.params)]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        b1, b2 = self.betas
        for name, p in zip(self.names, self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.step += 1
            p.m = b1 * p.m + (1 - b1) * g
            p.v = b2 * p.v + (1 - b2) * g * g
            m_hat = p.m / (1 - b1 ** p.step)
            v_hat = p.v / (1 - b2 ** p.step)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> Dict[str, object]:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay}


class ReduceLROnPlateau:
    """Multiply the optimizer's lr by ``factor`` once the monitored loss has
    failed to improve on its best value by a relative ``threshold`` for more
    than ``patience`` consecutive epochs."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 5,
                 threshold: float = 1e-4, min_lr: float = 0.0):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold) or self.best == math.inf:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.optimizer.lr

    def state(self) -> Dict[str, float]:
        return {"best": self.best, "bad_epochs": self.bad_epochs, "factor": self.factor,
                "patience": self.patience, "threshold": self.threshold}
