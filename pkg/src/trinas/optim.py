"""Update rules for the three parameter groups.

Network weights use momentum SGD with global-norm gradient clipping,
weight decay and a cosine-annealed rate. Architecture logits and the
adversarial pair use Adam with coupled weight decay (decay folded into the
gradient before the moment updates, as the reference implementations do).

All state lives per optimizer instance keyed by parameter name, so the
same class serves any WeightSet. ``momentum=0, weight_decay=0`` and no
clipping reduces SGD to the plain rule ``p -= lr * g`` exactly, which the
verification oracles rely on.
"""

from __future__ import annotations

import numpy as np

from .autodiff import GradientMap, WeightSet

__all__ = ["SGD", "Adam", "cosine_lr"]


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr_max at step 0 to lr_min at the last step."""
    if total_steps <= 1:
        return lr_min
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t))


class SGD:
    """Momentum SGD: clip the raw gradient by global norm, add weight
    decay, fold into the velocity, step."""

    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0,
                 grad_clip: float = None):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.grad_clip = grad_clip
        self._velocity = None

    def step(self, ws: WeightSet, grads: GradientMap, lr: float) -> None:
        if self.grad_clip is not None:
            grads = grads.clipped(self.grad_clip)
        use_momentum = self.momentum != 0.0
        if use_momentum and self._velocity is None:
            self._velocity = {n: np.zeros_like(t.data) for n, t in ws.items()}
        for name, t in ws.items():
            g = grads[name]
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * t.data
            if use_momentum:
                v = self._velocity[name]
                v *= self.momentum
                v += g
                g = v
            t.data = t.data - lr * g


class Adam:
    """Adam with bias correction and coupled weight decay.

    ``maximize=True`` flips the gradient, used for the adversarial critic
    which ascends its objective.
    """

    def __init__(self, betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, maximize: bool = False,
                 grad_clip: float = None):
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.maximize = bool(maximize)
        self.grad_clip = grad_clip
        self._m = None
        self._v = None
        self._t = 0

    def step(self, ws: WeightSet, grads: GradientMap, lr: float) -> None:
        if self.grad_clip is not None:
            grads = grads.clipped(self.grad_clip)
        if self._m is None:
            self._m = {n: np.zeros_like(t.data) for n, t in ws.items()}
            self._v = {n: np.zeros_like(t.data) for n, t in ws.items()}
        self._t += 1
        bc1 = 1.0 - self.b1 ** self._t
        bc2 = 1.0 - self.b2 ** self._t
        for name, t in ws.items():
            g = -grads[name] if self.maximize else grads[name]
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * t.data
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
