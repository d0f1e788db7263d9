"""Adam with decoupled weight decay, and the cosine schedule."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericalError


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Half-cosine decay from base_lr at epoch 0 toward 0, no warm-up."""
    if total_epochs < 1:
        raise ConfigError(f"total_epochs must be >= 1, got {total_epochs}")
    if epoch < 0 or epoch >= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Adam over a dict of named numpy parameters (0-d arrays included).

    Weight decay is decoupled from the adaptive step and never applied to
    parameters whose name appears in ``no_decay``.  ``step`` only touches
    parameters present in the gradient dict, so per-pass partial updates
    (one precision's activation scale) leave the rest untouched.
    """

    def __init__(self, params: dict[str, np.ndarray], weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 no_decay: frozenset[str] | set[str] = frozenset()):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.no_decay = set(no_decay)
        self._m = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}
        self._v = {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}
        self._t = {k: 0 for k in params}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.betas
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
            p = self.params[name]
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name] = b1 * self._m[name] + (1.0 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * np.asarray(p, dtype=np.float64)
            p[...] = (np.asarray(p, dtype=np.float64) - lr * update).astype(p.dtype)
