"""Sequence-gated bank of mixture-density experts over denoiser features.

One routing decision is made per action sequence (never per token): the
feature rows are average-pooled, a linear gate produces a probability
vector over experts, and the two strongest experts carry the training
loss (one at inference). Each expert maps every feature row to a full
Gaussian mixture (weights, means, stds) for that timestep's noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import (ConfigurationError, InvalidInputError,
                     InvariantViolationError)
from .layers import init_weight
from .tensor import GATING, Parameter, Tensor, expert_partition, no_grad

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GatingDecision:
    """Routing for one sequence: full distribution, selection, renormalized weights."""

    g: np.ndarray               # (n_experts,), on the simplex
    selected: tuple             # expert indices, |S|=2 training / 1 inference
    renormalized: np.ndarray    # weights over ``selected``, sums to 1
    mode: str                   # "training" | "inference"


@dataclass(frozen=True)
class GmmParams:
    """Per-timestep mixture parameters emitted by one expert."""

    pi: Tensor                  # (..., L, M), rows on the simplex
    log_pi: Tensor              # stable log of pi
    mu: Tensor                  # (..., L, M, d_action)
    sigma: Tensor               # (..., L, M, d_action), >= sigma_min


@dataclass
class TrainingLosses:
    """Everything one training forward produces for the update step."""

    per_expert: dict            # expert index -> L_i (Tensor scalar)
    mixture: Tensor             # L_mix scalar (includes aux)
    nll: float                  # batch-mean mixture NLL, aux excluded
    aux: float                  # aux loss value
    active: tuple               # shared top-k expert set for this step
    decisions: list             # per-sample GatingDecision (own top-k)


def _top_k(g: np.ndarray, k: int) -> tuple:
    order = np.argsort(-g, kind="stable")  # stable: ties break to lower index
    return tuple(int(i) for i in order[:k])


class MoeMdnHead:
    def __init__(self, dim: int, d_action: int, n_experts: int, n_components: int,
                 hidden: int, sigma_min: float, rng: np.random.Generator):
        if n_experts < 1 or n_components < 1:
            raise ConfigurationError("need at least one expert and one component")
        self.dim = dim
        self.d_action = d_action
        self.n_experts = n_experts
        self.n_components = n_components
        self.sigma_min = sigma_min
        self.gate_weights = Parameter(init_weight(rng, (dim, n_experts)) * 0.1,
                                      "head.gate.w", GATING)
        out_dim = n_components * (1 + 2 * d_action)
        self._experts = []
        for i in range(n_experts):
            part = expert_partition(i)
            self._experts.append({
                "w1": Parameter(init_weight(rng, (dim, hidden)),
                                f"head.expert{i}.w1", part),
                "b1": Parameter(np.zeros(hidden), f"head.expert{i}.b1", part),
                "w2": Parameter(init_weight(rng, (hidden, out_dim)) * 0.1,
                                f"head.expert{i}.w2", part),
                "b2": Parameter(np.zeros(out_dim), f"head.expert{i}.b2", part),
            })

    # -- routing ---------------------------------------------------------------

    def gate_probs(self, x_feat: Tensor) -> Tensor:
        """(B, L, D) -> (B, n_experts) routing probabilities, in-graph."""
        pooled = x_feat.mean(axis=-2)
        return ops.softmax(pooled @ self.gate_weights, axis=-1)

    def gate(self, x_feat, mode: str) -> GatingDecision:
        """Single-sequence routing decision from (L, D) features.

        Training selects the top two experts (monolithic single-expert heads
        route everything to expert 0); inference selects the single best.
        Ties break to the lower index.
        """
        if mode not in ("training", "inference"):
            raise InvalidInputError(f"unknown gating mode {mode!r}")
        data = x_feat.data if isinstance(x_feat, Tensor) else np.asarray(x_feat)
        if data.ndim != 2 or data.shape[-1] != self.dim:
            raise InvalidInputError(f"gate expects (L, {self.dim}) features")
        with no_grad():
            g = ops.softmax(Tensor(data.mean(axis=0)) @ self.gate_weights).data
        if mode == "inference" or self.n_experts == 1:
            selected = _top_k(g, 1)
        else:
            selected = _top_k(g, 2)
        renorm = g[list(selected)]
        renorm = renorm / renorm.sum()
        return GatingDecision(g, selected, renorm, mode)

    # -- experts ----------------------------------------------------------------

    def expert_forward(self, i: int, x_feat) -> GmmParams:
        """Expert ``i`` maps (..., L, D) features to per-timestep GMM parameters."""
        if not 0 <= i < self.n_experts:
            raise InvalidInputError(f"expert index {i} out of range")
        if not isinstance(x_feat, Tensor):
            x_feat = Tensor(x_feat)
        e = self._experts[i]
        h = ops.affine(x_feat, e["w1"], e["b1"]).silu()
        out = ops.affine(h, e["w2"], e["b2"])
        lead = out.shape[:-1]
        m, da = self.n_components, self.d_action
        out = out.reshape(lead + (m, 1 + 2 * da))
        logits = out[..., 0]
        mu = out[..., 1:1 + da]
        sigma = out[..., 1 + da:].exp() + self.sigma_min
        lse = ops.log_sum_exp(logits, axis=-1)
        log_pi = logits - lse.reshape(lse.shape + (1,))
        return GmmParams(pi=log_pi.exp(), log_pi=log_pi, mu=mu, sigma=sigma)

    # -- densities ----------------------------------------------------------------

    def _expert_joint(self, eps: np.ndarray, params: GmmParams) -> Tensor:
        """log prod_t sum_m pi N(eps_t) -> (...,) one value per sequence."""
        if np.min(params.sigma.data) < self.sigma_min - 1e-12:
            raise InvariantViolationError("sigma fell below sigma_min")
        diff = (Tensor(eps[..., None, :]) - params.mu) / params.sigma
        quad = (diff ** 2.0).sum(axis=-1)
        logdet = params.sigma.log().sum(axis=-1)
        comp = params.log_pi - 0.5 * quad - logdet - 0.5 * self.d_action * LOG_2PI
        per_t = ops.log_sum_exp(comp, axis=-1)
        return per_t.sum(axis=-1)

    def joint_log_density(self, eps: np.ndarray, params_by_expert: dict,
                          g_prime) -> Tensor:
        """Top-k mixture log density of a noise sequence (Eq. at both LSE levels).

        ``eps`` is (L, d_action) or (B, L, d_action); ``g_prime`` the
        renormalized weights over the active experts (vector, or (B, k) Tensor).
        """
        if len(params_by_expert) < 1:
            raise InvalidInputError("need at least one active expert")
        eps = np.asarray(eps, dtype=np.float64)
        single = eps.ndim == 2
        indices = tuple(sorted(params_by_expert.keys()))
        joints = [self._expert_joint(eps, params_by_expert[i]) for i in indices]
        stacked = ops.stack(joints, axis=-1)
        if not isinstance(g_prime, Tensor):
            g_prime = Tensor(np.asarray(g_prime, dtype=np.float64))
        total = ops.log_sum_exp(g_prime.log() + stacked, axis=-1)
        return total if not single or total.ndim == 0 else total

    def mdn_nll(self, eps: np.ndarray, params_by_expert: dict, g_prime) -> Tensor:
        """Training loss: negative joint log density (mean over any batch)."""
        joint = self.joint_log_density(eps, params_by_expert, g_prime)
        return -(joint.mean() if joint.ndim > 0 else joint)

    # -- auxiliary balancing ----------------------------------------------------------

    def aux_loss(self, gate_probs: Tensor, selections: list, alpha: float,
                 beta: float) -> Tensor:
        """Load/importance balancing: squared CV over batch-summed stats.

        The load term's value uses true selection counts; its gradient flows
        through the top-k-masked summed probabilities (counts are flat).
        """
        b = gate_probs.shape[0]
        if b == 0 or not selections:
            raise InvalidInputError("aux_loss needs a nonempty batch")

        def cv2(x: Tensor) -> Tensor:
            m = x.mean()
            return ((x - m) ** 2.0).mean() / (m * m)

        importance = gate_probs.sum(axis=0)
        l_importance = cv2(importance)
        mask = np.zeros(gate_probs.shape)
        counts = np.zeros(self.n_experts)
        for row, sel in enumerate(selections):
            for i in sel:
                mask[row, i] = 1.0
                counts[i] += 1.0
        proxy = (gate_probs * Tensor(mask)).sum(axis=0)
        l_load_proxy = cv2(proxy)
        counts_cv2 = float(counts.var() / counts.mean() ** 2)
        l_load = l_load_proxy + (counts_cv2 - float(l_load_proxy.data))
        return alpha * l_load + beta * l_importance

    # -- training forward ------------------------------------------------------------

    def training_losses(self, x_feat: Tensor, eps: np.ndarray, aux_alpha: float,
                        aux_beta: float) -> TrainingLosses:
        """Batch training pass with one shared top-k routing set for the step.

        Per-sample gate vectors drive the auxiliary loss and the per-sample
        renormalized mixture weights; the active expert set is pooled over
        the batch so each step trains exactly two experts (one when
        monolithic).
        """
        probs = self.gate_probs(x_feat)
        k = 1 if self.n_experts == 1 else 2
        pooled = probs.data.mean(axis=0)
        active = _top_k(pooled, k)
        own_selections = [_top_k(row, k) for row in probs.data]
        decisions = [GatingDecision(row.copy(), sel,
                                    row[list(sel)] / row[list(sel)].sum(),
                                    "training")
                     for row, sel in zip(probs.data, own_selections)]

        sel_probs = probs[:, np.array(active)]
        g_prime = sel_probs / sel_probs.sum(axis=-1, keepdims=True)
        params = {i: self.expert_forward(i, x_feat) for i in active}

        joints = {i: self._expert_joint(eps, params[i]) for i in active}
        stacked = ops.stack([joints[i] for i in active], axis=-1)
        mixture_ll = ops.log_sum_exp(g_prime.log() + stacked, axis=-1)
        nll = -mixture_ll.mean()

        aux = self.aux_loss(probs, own_selections, aux_alpha, aux_beta)
        per_expert = {i: -joints[i].mean() + aux * (1.0 / k) for i in active}
        mixture = nll + aux
        return TrainingLosses(per_expert=per_expert, mixture=mixture,
                              nll=float(nll.data), aux=float(aux.data),
                              active=active, decisions=decisions)

    # -- inference ----------------------------------------------------------------

    def predict_noise(self, x_feat: np.ndarray) -> np.ndarray:
        """Hard top-1 expert, then per-timestep argmax-weight component mean."""
        with no_grad():
            decision = self.gate(x_feat, "inference")
            i_star = decision.selected[0]
            params = self.expert_forward(i_star, x_feat)
            comp = np.argmax(params.pi.data, axis=-1)           # (L,), ties -> lower
            mu = params.mu.data
            return mu[np.arange(mu.shape[0]), comp]

    def parameters(self) -> list[Parameter]:
        out = [self.gate_weights]
        for e in self._experts:
            out += [e["w1"], e["b1"], e["w2"], e["b2"]]
        return out
