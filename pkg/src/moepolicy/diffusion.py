"""Forward noising and deterministic DDIM reverse iteration.

The schedule is a squared-cosine cumulative product; inference walks an
evenly spaced sub-sequence of the training steps with eta = 0, so sampling
is a pure function of (model, condition, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class DiffusionSchedule:
    k_train: int
    alpha_bar: np.ndarray          # K+1 values in (0, 1], alpha_bar[0] = 1
    inference_steps: tuple         # K = s_0 > s_1 > ... > s_n = 0


def make_schedule(k_train: int, n_inference: int) -> DiffusionSchedule:
    """Squared-cosine alpha_bar over ``k_train`` steps plus the DDIM subsequence."""
    if k_train < 1 or n_inference < 1 or n_inference > k_train:
        raise ConfigurationError(
            f"need 1 <= n_inference <= k_train, got K={k_train}, n={n_inference}")
    s = 0.008
    ks = np.arange(k_train + 1)
    f = np.cos((ks / k_train + s) / (1 + s) * np.pi / 2.0) ** 2
    betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    steps = tuple(int(round(v)) for v in np.linspace(k_train, 0, n_inference + 1))
    if len(set(steps)) != len(steps):
        raise ConfigurationError("inference step grid collapsed; lower n_inference")
    return DiffusionSchedule(k_train, alpha_bar, steps)


def add_noise(a0: np.ndarray, eps: np.ndarray, k: int,
              schedule: DiffusionSchedule) -> np.ndarray:
    """A^k = sqrt(abar_k) A^0 + sqrt(1 - abar_k) eps."""
    if not 0 <= k <= schedule.k_train:
        raise InvalidInputError(f"diffusion step {k} outside [0, {schedule.k_train}]")
    ab = schedule.alpha_bar[k]
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def ddim_step(a_k: np.ndarray, eps_pred: np.ndarray, k: int, k_prev: int,
              schedule: DiffusionSchedule) -> np.ndarray:
    """One deterministic reverse step k -> k_prev (eta = 0)."""
    if not (schedule.k_train >= k > k_prev >= 0):
        raise InvalidInputError(f"need K >= k > k_prev >= 0, got k={k}, k_prev={k_prev}")
    ab_k = schedule.alpha_bar[k]
    ab_prev = schedule.alpha_bar[k_prev]
    x0_hat = (a_k - np.sqrt(1.0 - ab_k) * eps_pred) / np.sqrt(ab_k)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_pred


def sample(policy, s, schedule: DiffusionSchedule, seed: int) -> np.ndarray:
    """Draw A^K from the seed and iterate predict + ddim_step down to A^0.

    ``policy`` needs ``horizon``, ``action_dim`` and
    ``predict_noise(a_k, k, s) -> ndarray``; the result is clamped to [-1, 1].
    """
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((policy.horizon, policy.action_dim))
    for k, k_prev in zip(schedule.inference_steps[:-1], schedule.inference_steps[1:]):
        eps_pred = policy.predict_noise(a, k, s)
        a = ddim_step(a, eps_pred, k, k_prev, schedule)
    return np.clip(a, -1.0, 1.0)
