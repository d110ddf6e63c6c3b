"""Parameter updates: the infinity-norm Adam variant and a stepped LR decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor


class Adamax:
    """Adam with an infinity-norm second moment.

    Per parameter: m tracks the decayed gradient mean, u the decayed
    running max of |gradient|. The update is

        m <- beta1 * m + (1 - beta1) * g
        u <- max(beta2 * u, |g|)
        theta <- theta - (lr / (1 - beta1^t)) * m / (u + eps)

    Parameters whose gradient is absent for a step (frozen, or simply not
    touched by the loss) keep their state and value unchanged.
    """

    def __init__(self, tensors: dict, lr: float = 0.002,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError("lr must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.tensors = dict(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros(t.shape) for name, t in self.tensors.items()}
        self._u = {name: np.zeros(t.shape) for name, t in self.tensors.items()}

    def step(self, tape: Tape) -> None:
        """Apply one update using the gradients accumulated on the tape."""
        self.t += 1
        correction = 1.0 - self.beta1 ** self.t
        for name, tensor in self.tensors.items():
            g = tape.grad(tensor)
            if g is None:
                continue
            g = np.asarray(g).reshape(tensor.data.shape)
            m = self._m[name]
            u = self._u[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            tensor.data -= (self.lr / correction) * m / (u + self.eps)


@dataclass
class LrSchedule:
    """Step decay: the rate halves every fixed number of epochs."""

    base_lr: float = 0.002
    decay_factor: float = 0.5
    decay_every: int = 10

    def rate(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch index."""
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        return self.base_lr * self.decay_factor ** (epoch // self.decay_every)
