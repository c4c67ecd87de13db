"""Reusable parameterized layers: linear stacks and the GQA transformer block."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Parameter, Tensor


def init_weight(rng: np.random.Generator, shape: tuple, fan_in: int | None = None):
    fan = fan_in if fan_in is not None else shape[0]
    return rng.normal(0.0, 1.0 / np.sqrt(fan), size=shape)


class Linear:
    def __init__(self, d_in: int, d_out: int, name: str, rng: np.random.Generator,
                 partition: str, bias: bool = True, scale: float = 1.0):
        self.w = Parameter(init_weight(rng, (d_in, d_out)) * scale,
                           name=f"{name}.w", partition=partition)
        self.b = Parameter(np.zeros(d_out), name=f"{name}.b",
                           partition=partition) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.affine(x, self.w, self.b)

    def parameters(self) -> list[Parameter]:
        return [self.w] + ([self.b] if self.b is not None else [])


class TransformerBlock:
    """Pre-norm block: GQA self-attention with RoPE, then a SiLU MLP."""

    def __init__(self, dim: int, n_heads: int, n_kv_groups: int, name: str,
                 rng: np.random.Generator, partition: str, mlp_ratio: int = 4):
        if dim % n_heads != 0:
            raise ConfigurationError(f"dim={dim} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.n_kv_groups = n_kv_groups
        self.head_dim = dim // n_heads
        kv_dim = n_kv_groups * self.head_dim
        hidden = mlp_ratio * dim
        self.gain_attn = Parameter(np.ones(dim), f"{name}.norm_attn", partition)
        self.wq = Parameter(init_weight(rng, (dim, dim)), f"{name}.wq", partition)
        self.wk = Parameter(init_weight(rng, (dim, kv_dim)), f"{name}.wk", partition)
        self.wv = Parameter(init_weight(rng, (dim, kv_dim)), f"{name}.wv", partition)
        self.wo = Parameter(init_weight(rng, (dim, dim)), f"{name}.wo", partition)
        self.gain_mlp = Parameter(np.ones(dim), f"{name}.norm_mlp", partition)
        self.w1 = Parameter(init_weight(rng, (dim, hidden)), f"{name}.w1", partition)
        self.b1 = Parameter(np.zeros(hidden), f"{name}.b1", partition)
        self.w2 = Parameter(init_weight(rng, (hidden, dim)), f"{name}.w2", partition)
        self.b2 = Parameter(np.zeros(dim), f"{name}.b2", partition)

    def __call__(self, x: Tensor, positions: np.ndarray) -> Tensor:
        h = ops.rms_norm(x, self.gain_attn)
        q = ops.rope_apply(h @ self.wq, positions, head_dim=self.head_dim)
        k = ops.rope_apply(h @ self.wk, positions, head_dim=self.head_dim)
        v = h @ self.wv
        attn = ops.gqa_attention(q, k, v, self.n_heads, self.n_kv_groups)
        x = x + attn @ self.wo
        h = ops.rms_norm(x, self.gain_mlp)
        h = ops.affine(h, self.w1, self.b1).silu()
        return x + ops.affine(h, self.w2, self.b2)

    def parameters(self) -> list[Parameter]:
        return [self.gain_attn, self.wq, self.wk, self.wv, self.wo,
                self.gain_mlp, self.w1, self.b1, self.w2, self.b2]
