"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from sleepfuse.errors import ConfigError, TrainingError


def lr_schedule(step: int, total_steps: int, initial_lr: float) -> float:
    """Cosine decay from ``initial_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam moments plus weight decay applied directly to the parameters.

    The decay term ``p -= lr * weight_decay * p`` is independent of the
    moment update.  Frozen (non-trainable) parameters are skipped entirely:
    no moment update, no decay, bit-identical values.
    """

    def __init__(
        self,
        params: list,
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0.0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        """Apply one update; ``lr`` overrides the stored rate (scheduling)."""
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for p in self.params:
            if not p.trainable:
                continue
            grad = p.grad
            if grad is None:
                grad = np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad**2
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - lr * self.weight_decay * p.data - lr * update
