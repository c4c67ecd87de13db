"""Min-norm combination of per-expert gradients on the shared parameters.

Given the gradients of the active experts' losses with respect to the
shared parameter partition, find simplex coefficients minimizing the norm
of the combined gradient (guaranteeing a common descent direction), then
add the mixture-level gradient to form the final shared update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .tensor import GATING, SHARED, Parameter, Tensor, backward

FALLBACK_NORM = 1e-12
PAIRWISE_SWEEPS = 50


@dataclass(frozen=True)
class GradientSet:
    """Flattened per-expert gradients over the shared parameter space."""

    expert_indices: tuple
    matrix: np.ndarray          # (k, n_shared), row i is grad of expert_indices[i]

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.expert_indices):
            raise InvalidInputError("gradient matrix must be (k, n_shared)")


@dataclass(frozen=True)
class Coefficients:
    alpha: np.ndarray           # nonnegative, sums to 1
    fallback: bool              # uniform fallback triggered (combined norm ~ 0)


def shared_parameters(params) -> list:
    """The theta_shared partition: shared backbone/encoder weights plus gating."""
    return [p for p in params if p.trainable and p.partition in (SHARED, GATING)]


def flatten_grads(grad_map: dict, shared: list) -> np.ndarray:
    return np.concatenate([np.ravel(grad_map[p]) for p in shared])


def unflatten_to(vector: np.ndarray, shared: list) -> dict:
    out, ofs = {}, 0
    for p in shared:
        out[p] = vector[ofs:ofs + p.size].reshape(p.shape)
        ofs += p.size
    return out


def per_expert_gradients(losses: dict, params: list):
    """One reverse pass per active expert.

    Returns the flattened shared-partition GradientSet plus, per expert,
    the full gradient map (used to update that expert's own parameters).
    """
    shared = shared_parameters(params)
    indices = tuple(sorted(losses.keys()))
    rows, full_maps = [], {}
    for i in indices:
        grad_map = backward(losses[i], params=params)
        rows.append(flatten_grads(grad_map, shared))
        full_maps[i] = grad_map
    return GradientSet(indices, np.stack(rows)), full_maps


def _min_norm_pair(g1: np.ndarray, g2: np.ndarray) -> float:
    """Closed-form alpha_1 minimizing ||a*g1 + (1-a)*g2|| over [0, 1]."""
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom < 1e-24:
        return 0.5
    return float(np.clip((g2 - g1) @ g2 / denom, 0.0, 1.0))


def _pairwise_descent(matrix: np.ndarray) -> np.ndarray:
    """Coordinate descent over coefficient pairs with exact 1-D line search."""
    k = matrix.shape[0]
    gram = matrix @ matrix.T
    alpha = np.full(k, 1.0 / k)
    for _ in range(PAIRWISE_SWEEPS):
        for i in range(k):
            for j in range(i + 1, k):
                m = alpha[i] + alpha[j]
                if m <= 0.0:
                    continue
                denom = gram[i, i] - 2.0 * gram[i, j] + gram[j, j]
                if denom < 1e-24:
                    continue
                rest = alpha.copy()
                rest[i] = rest[j] = 0.0
                mr = gram @ rest
                numer = -(mr[i] - mr[j] + m * (gram[i, j] - gram[j, j]))
                t = float(np.clip(numer / denom, 0.0, m))
                alpha[i], alpha[j] = t, m - t
    return alpha


def min_norm_coefficients(grads: GradientSet) -> Coefficients:
    """Simplex coefficients minimizing the combined gradient's l2 norm."""
    matrix = grads.matrix
    k = matrix.shape[0]
    if k == 0:
        raise InvalidInputError("min_norm_coefficients needs at least one gradient")
    if k == 1:
        return Coefficients(np.array([1.0]), False)
    if k == 2:
        a1 = _min_norm_pair(matrix[0], matrix[1])
        alpha = np.array([a1, 1.0 - a1])
    else:
        alpha = _pairwise_descent(matrix)
    combined = alpha @ matrix
    if np.linalg.norm(combined) < FALLBACK_NORM:
        return Coefficients(np.full(k, 1.0 / k), True)
    return Coefficients(alpha, False)


def combine(coefficients: Coefficients, grads: GradientSet) -> np.ndarray:
    """g_modulated = sum_i alpha_i g_i."""
    if coefficients.alpha.shape[0] != grads.matrix.shape[0]:
        raise InvalidInputError("coefficient/gradient count mismatch")
    return coefficients.alpha @ grads.matrix


def shared_update(g_modulated: np.ndarray, grad_of_mixture: np.ndarray) -> np.ndarray:
    """Final shared-parameter gradient: modulated sum plus the mixture gradient."""
    if g_modulated.shape != grad_of_mixture.shape:
        raise InvalidInputError("shared gradient length mismatch")
    return g_modulated + grad_of_mixture
