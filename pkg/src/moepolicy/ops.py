"""Attention-stack math: softmax, log-sum-exp, RMSNorm, RoPE, grouped-query attention.

All functions operate on :class:`~moepolicy.tensor.Tensor` and record into
the autodiff graph. Shapes follow numpy broadcasting; sequence position is
always axis -2 for the positional ops.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .tensor import Parameter, Tensor, _make, concatenate, stack  # noqa: F401 (re-export)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    if not np.all(np.isfinite(x.data)):
        raise InvalidInputError("softmax requires finite inputs")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), "softmax", bw)


def log_sum_exp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis``; -inf entries are allowed."""
    if x.shape[axis] == 0:
        raise InvalidInputError("log_sum_exp over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m_safe)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m_safe + np.log(s), axis=axis)
    out = np.where(np.squeeze(np.isfinite(m), axis=axis), out, -np.inf)

    def bw(g):
        w = e / s
        return (np.expand_dims(g, axis) * np.where(np.isfinite(m), w, 0.0),)

    return _make(out, (x,), "log_sum_exp", bw)


def rms_norm(x: Tensor, gain: Parameter, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis: gain * x / sqrt(mean(x^2) + eps)."""
    n = x.shape[-1]
    ms = (x.data ** 2).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out = gain.data * x.data * r

    def bw(g):
        gg = g * gain.data
        dot = (gg * x.data).mean(axis=-1, keepdims=True)
        dx = r * gg - (r ** 3) * x.data * dot
        dgain = (g * x.data * r).reshape(-1, n).sum(axis=0)
        return (dx, dgain)

    return _make(out, (x, gain), "rms_norm", bw)


def rope_apply(x: Tensor, positions: np.ndarray, base: float = 10000.0,
               head_dim: int | None = None) -> Tensor:
    """Rotate consecutive feature pairs by position-dependent angles.

    ``positions`` indexes axis -2. With ``head_dim`` set, the frequency
    pattern repeats every ``head_dim`` features so rotation stays per-head
    when heads are packed flat in the last axis.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise InvalidInputError("rope_apply needs an even last axis")
    span = head_dim if head_dim is not None else d
    if d % span != 0 or span % 2 != 0:
        raise InvalidInputError("head_dim must be even and divide the last axis")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (x.shape[-2],):
        raise InvalidInputError("positions must match the sequence axis")

    pair_idx = np.arange(d // 2) % (span // 2)
    inv_freq = base ** (-2.0 * pair_idx / span)
    angles = positions[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)

    x0, x1 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bw(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = g0 * cos + g1 * sin
        dx[..., 1::2] = -g0 * sin + g1 * cos
        return (dx,)

    return _make(out, (x,), "rope", bw)


def gqa_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                  n_kv_groups: int, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with key/value heads shared across groups.

    ``q`` is (..., T, n_heads*head_dim); ``k``/``v`` are
    (..., T_k, n_kv_groups*head_dim). Returns (..., T, n_heads*head_dim).
    """
    if n_heads % n_kv_groups != 0:
        raise ConfigurationError(
            f"n_heads={n_heads} not divisible by n_kv_groups={n_kv_groups}")
    if q.shape[-1] % n_heads != 0 or k.shape[-1] % n_kv_groups != 0:
        raise ConfigurationError("feature dims inconsistent with head counts")
    hd = q.shape[-1] // n_heads
    if k.shape[-1] != n_kv_groups * hd or v.shape[-1] != n_kv_groups * hd:
        raise ConfigurationError("k/v dims inconsistent with query head_dim")
    per_group = n_heads // n_kv_groups
    t_q, t_k = q.shape[-2], k.shape[-2]
    lead = q.shape[:-2]

    # (..., T, H*hd) -> (..., G, per_group, T, hd); kv get a broadcast axis.
    qh = q.reshape(lead + (t_q, n_heads, hd)).swapaxes(-3, -2)
    qh = qh.reshape(lead + (n_kv_groups, per_group, t_q, hd))
    kh = k.reshape(lead + (t_k, n_kv_groups, hd)).swapaxes(-3, -2)
    kh = kh.reshape(lead + (n_kv_groups, 1, t_k, hd))
    vh = v.reshape(lead + (t_k, n_kv_groups, hd)).swapaxes(-3, -2)
    vh = vh.reshape(lead + (n_kv_groups, 1, t_k, hd))

    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = softmax(scores, axis=-1)
    out = weights @ vh
    out = out.reshape(lead + (n_heads, t_q, hd)).swapaxes(-3, -2)
    return out.reshape(lead + (t_q, n_heads * hd))


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    if b is not None:
        y = y + b
    return y


def mean_pool(x: Tensor, axis: int) -> Tensor:
    return x.mean(axis=axis)
