"""AdamW with global-norm clipping and parameter EMA over name -> array dicts."""
from __future__ import annotations

import numpy as np


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, clip: float = 1.0):
        if lr <= 0 or weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.clip = weight_decay, clip
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> float:
        """Apply one update in place; returns the pre-clip gradient norm."""
        norm = global_norm(grads)
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient")
        f = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, g in grads.items():
            g = g * f
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p = self.params[k]
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def ema_update(params: dict, ema_params: dict, decay: float) -> dict:
    """``ema' = decay * ema + (1 - decay) * params`` in float64; returns a new dict."""
    if set(params) != set(ema_params):
        raise ValueError("parameter sets differ")
    out = {}
    for k, p in params.items():
        e = np.asarray(ema_params[k], dtype=np.float64)
        if e.shape != np.shape(p):
            raise ValueError(f"shape mismatch for {k}: {e.shape} vs {np.shape(p)}")
        out[k] = decay * e + (1.0 - decay) * np.asarray(p, dtype=np.float64)
    return out
