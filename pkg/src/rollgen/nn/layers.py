"""Layer primitives with explicit forward/backward pairs.

Every forward returns ``(output, cache)``; the matching backward consumes the
upstream gradient and that cache. Arrays are float64 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


def linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(g, x, w, has_bias=True):
    """Returns (dx, dw, db) for ``y = x @ w + b`` with arbitrary leading axes."""
    dx = g @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    dw = x2.T @ g2
    db = g2.sum(axis=0) if has_bias else None
    return dx, dw, db


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_backward(g, x):
    s = sigmoid(x)
    return g * s * (1.0 + x * (1.0 - s))


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class NormCache:
    """Row statistics kept for the backward pass: one scalar (or two) per row, never the normalized tensor."""

    inv: np.ndarray
    mean: Optional[np.ndarray] = None

    @property
    def scalars_per_row(self) -> int:
        return 1 if self.mean is None else 2


def rmsnorm(x, gain, eps=1e-6):
    x = np.asarray(x)
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    return gain * (x * inv), NormCache(inv=inv[..., 0])


def _rms_core(g, z, gain, inv):
    gz = g * gain
    return inv * (gz - z * np.mean(gz * z, axis=-1, keepdims=True))


def rmsnorm_backward(g, x, gain, cache: NormCache):
    """Gradient from ``x``, ``gain`` and the cached inverse RMS only."""
    inv = cache.inv[..., None]
    z = x * inv
    dx = _rms_core(g, z, gain, inv)
    dgain = (g * z).reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dgain


def rmsnorm_backward_fullcache(g, z, gain, inv):
    """Reference backward that keeps the whole normalized tensor ``z`` from the forward pass."""
    inv = inv[..., None]
    dx = _rms_core(g, z, gain, inv)
    dgain = (g * z).reshape(-1, z.shape[-1]).sum(axis=0)
    return dx, dgain


def layernorm(x, gain, bias, eps=1e-6):
    mean = np.mean(x, axis=-1, keepdims=True)
    xc = x - mean
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    return gain * (xc * inv) + bias, NormCache(inv=inv[..., 0], mean=mean[..., 0])


def layernorm_backward(g, x, gain, cache: NormCache):
    inv = cache.inv[..., None]
    z = (x - cache.mean[..., None]) * inv
    gz = g * gain
    dx = inv * (gz - np.mean(gz, axis=-1, keepdims=True) - z * np.mean(gz * z, axis=-1, keepdims=True))
    d = x.shape[-1]
    dgain = (g * z).reshape(-1, d).sum(axis=0)
    dbias = g.reshape(-1, d).sum(axis=0)
    return dx, dgain, dbias


def apply_rope(x, cos, sin):
    """Rotate interleaved (real, imag) pairs of the last axis by the given angles."""
    if x.shape[-1] % 2:
        raise ValueError(f"RoPE needs an even last dimension, got {x.shape[-1]}")
    xr = x[..., 0::2]
    xi = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xr * cos - xi * sin
    out[..., 1::2] = xr * sin + xi * cos
    return out


def rope_backward(g, cos, sin):
    # Transpose of a rotation is the rotation by the negated angle.
    return apply_rope(g, cos, -sin)


def rope_tables(positions, freqs):
    """cos/sin tables of shape (N, d/2) from per-axis positions (N, A) and per-pair (axis, freq)."""
    axis, freq = freqs
    angles = positions[:, axis] * freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_frequencies(head_dim: int, theta: float = 10000.0):
    """Split the head's rotary pairs between time, height and width axes."""
    pairs = head_dim // 2
    n_sp = pairs // 4
    n_t = pairs - 2 * n_sp
    axis, freq = [], []
    for ax, n in ((0, n_t), (1, n_sp), (2, n_sp)):
        for j in range(n):
            axis.append(ax)
            freq.append(theta ** (-j / n))
    return np.array(axis, dtype=np.int64), np.array(freq)


def attention(q, k, v):
    """Softmax attention on (B, H, N, d) tensors."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ v, (q, k, v, p, scale)


def attention_backward(g, cache):
    q, k, v, p, scale = cache
    dv = np.swapaxes(p, -1, -2) @ g
    dp = g @ np.swapaxes(v, -1, -2)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv


def guidance_attention(q_noisy, k_noisy, v_noisy, q_hist, k_hist, v_hist, amp):
    """Joint attention where history keys are scaled per head by ``amp`` of shape (H, d).

    Output rows follow the query order: noisy positions first, then history.
    """
    if q_noisy.shape[1] != q_hist.shape[1] or q_noisy.shape[-1] != q_hist.shape[-1]:
        raise ValueError("noisy and history heads disagree")
    if amp.shape != (q_noisy.shape[1], q_noisy.shape[-1]):
        raise ValueError(f"amp must have shape (heads, head_dim), got {amp.shape}")
    k_mod = k_hist * amp[None, :, None, :]
    q = np.concatenate([q_noisy, q_hist], axis=2)
    k = np.concatenate([k_noisy, k_mod], axis=2)
    v = np.concatenate([v_noisy, v_hist], axis=2)
    out, cache = attention(q, k, v)
    return out, (cache, k_hist, amp, q_noisy.shape[2], k_noisy.shape[2])


def guidance_attention_backward(g, cache):
    inner, k_hist, amp, nq, nk = cache
    dq, dk, dv = attention_backward(g, inner)
    dk_mod = dk[:, :, nk:]
    damp = np.sum(dk_mod * k_hist, axis=(0, 2))
    return (dq[:, :, :nq], dk[:, :, :nk], dv[:, :, :nk],
            dq[:, :, nq:], dk_mod * amp[None, :, None, :], dv[:, :, nk:], damp)


def cross_attention(q_noisy, k_text, v_text):
    if k_text.shape[2] < 1:
        raise ValueError("text must contain at least one token")
    return attention(q_noisy, k_text, v_text)


def split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0):
    """Standard sin/cos timestep embedding for scalar or (B,) timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)
