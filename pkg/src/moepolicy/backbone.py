"""Conditional denoising transformer: noisy action chunk -> per-step features.

Conditioning is injected as two prefix tokens (projected state, projected
timestep embedding) ahead of the projected action tokens; full self-attention
mixes them and the action-token rows of the final layer are the feature
sequence consumed by the expert head.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import InvalidInputError
from .layers import TransformerBlock, init_weight
from .tensor import SHARED, Parameter, Tensor


def timestep_embed(k: int, dim: int, k_max: int) -> np.ndarray:
    """Sinusoidal embedding of a diffusion step; injective over [0, k_max]."""
    if not 0 <= k <= k_max:
        raise InvalidInputError(f"timestep {k} outside [0, {k_max}]")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    return np.concatenate([np.sin(k * freqs), np.cos(k * freqs)])


def build_condition(z: Tensor, proprio: np.ndarray) -> Tensor:
    """Mean-pool the conditioned tokens and append the proprioceptive state.

    (B, T, d) x (B, d_proprio) -> (B, d + d_proprio).
    """
    proprio = np.asarray(proprio, dtype=np.float64)
    if proprio.ndim != 2 or proprio.shape[0] != z.shape[0]:
        raise InvalidInputError("proprio batch must match conditioned tokens")
    pooled = z.mean(axis=1)
    return ops.concatenate([pooled, Tensor(proprio)], axis=-1)


class DenoiserBackbone:
    """F_T(A^k, k, s) -> X_feat of shape (batch, horizon, dim)."""

    def __init__(self, d_action: int, d_condition: int, d_token: int, dim: int,
                 horizon: int, k_max: int, n_heads: int, n_kv_groups: int,
                 n_blocks: int, rng: np.random.Generator):
        self.dim = dim
        self.horizon = horizon
        self.d_action = d_action
        self.k_max = k_max
        self.d_token = d_token
        self.w_cond = Parameter(init_weight(rng, (d_condition, dim)), "bb.w_cond", SHARED)
        self.b_cond = Parameter(np.zeros(dim), "bb.b_cond", SHARED)
        self.w_time = Parameter(init_weight(rng, (d_token, dim)), "bb.w_time", SHARED)
        self.b_time = Parameter(np.zeros(dim), "bb.b_time", SHARED)
        self.w_act = Parameter(init_weight(rng, (d_action, dim), fan_in=d_action),
                               "bb.w_act", SHARED)
        self.b_act = Parameter(np.zeros(dim), "bb.b_act", SHARED)
        self.blocks = [TransformerBlock(dim, n_heads, n_kv_groups,
                                        f"bb.block{i}", rng, SHARED)
                       for i in range(n_blocks)]
        self.final_gain = Parameter(np.ones(dim), "bb.final_norm", SHARED)
        self._positions = np.arange(horizon + 2, dtype=np.float64)

    def __call__(self, noisy_actions, k: int, condition: Tensor) -> Tensor:
        """(B, L, d_action) x step x (B, d_condition) -> (B, L, dim)."""
        if not isinstance(noisy_actions, Tensor):
            noisy_actions = Tensor(noisy_actions)
        if noisy_actions.shape[-2:] != (self.horizon, self.d_action):
            raise InvalidInputError(
                f"noisy action shape {noisy_actions.shape[-2:]} != "
                f"({self.horizon}, {self.d_action})")
        if not np.all(np.isfinite(noisy_actions.data)):
            raise InvalidInputError("noisy actions must be finite")
        b = noisy_actions.shape[0]
        cond_tok = ops.affine(condition, self.w_cond, self.b_cond)
        cond_tok = cond_tok.reshape(b, 1, self.dim)
        ktok = Tensor(timestep_embed(k, self.d_token, self.k_max)[None])
        time_tok = ops.affine(ktok, self.w_time, self.b_time)
        time_tok = (time_tok.reshape(1, 1, self.dim) +
                    Tensor(np.zeros((b, 1, self.dim))))
        act_tok = ops.affine(noisy_actions, self.w_act, self.b_act)
        x = ops.concatenate([cond_tok, time_tok, act_tok], axis=1)
        for block in self.blocks:
            x = block(x, self._positions)
        x = ops.rms_norm(x, self.final_gain)
        return x[:, 2:, :]

    def parameters(self) -> list[Parameter]:
        out = [self.w_cond, self.b_cond, self.w_time, self.b_time,
               self.w_act, self.b_act]
        for blk in self.blocks:
            out += blk.parameters()
        out.append(self.final_gain)
        return out
