"""Adam with named parameter groups, global-norm clipping, cosine decay.

Groups exist so fine-tuning can run layerwise learning-rate decay: each group
carries its own base rate and a single scalar ``lr_scale`` multiplies all of
them, preserving the ratios. Moment buffers persist across calls and are
keyed by position, so the same parameter tensors must be passed to every
step (the model owns them; ``Tensor.data`` is replaced, never resized).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError


def clip_global_norm(grads, max_norm):
    """Scale the list of gradient arrays so the joint L2 norm <= max_norm.

    Returns (scaled_grads, pre_clip_norm).
    """
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NonFiniteError("clip_global_norm", "gradient norm is not finite")
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def cosine_factor(epoch, total_epochs):
    """Cosine annealing multiplier for 1-based ``epoch`` in [1, total].

    Progress p = (epoch-1)/total runs over [0, 1); the factor is
    0.5*(1+cos(pi*p)), i.e. 1.0 at epoch 1 and exactly 0.5 at p = 0.5
    (epoch = total/2 + 1 for even totals).
    """
    p = (epoch - 1) / float(total_epochs)
    return 0.5 * (1.0 + math.cos(math.pi * min(max(p, 0.0), 1.0)))


class Adam:
    """Adam (Kingma & Ba) over named parameter groups.

    Parameters
    ----------
    groups : dict[str, tuple[list[Tensor], float]]
        name -> (parameter tensors, base learning rate).
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._params = []
        self._rates = []
        self.group_names = []
        for name, (tensors, lr) in groups.items():
            self.group_names.append(name)
            for p in tensors:
                self._params.append(p)
                self._rates.append(float(lr))
        self._m = [np.zeros_like(p.data) for p in self._params]
        self._v = [np.zeros_like(p.data) for p in self._params]

    @property
    def params(self):
        return list(self._params)

    def step(self, grads, lr_scale=1.0):
        """Apply one update. ``grads`` aligns with ``self.params``."""
        if len(grads) != len(self._params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v, lr in zip(self._params, grads, self._m, self._v,
                                  self._rates):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - (lr * lr_scale) * mhat / (np.sqrt(vhat) + self.eps)
