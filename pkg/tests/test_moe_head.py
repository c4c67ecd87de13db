"""Gating, GMM parameterization, joint density vs high-precision oracle, aux loss."""

import mpmath as mp
import numpy as np
import pytest

from moepolicy.errors import InvalidInputError
from moepolicy.moe_head import GmmParams, MoeMdnHead
from moepolicy.tensor import Tensor, backward, finite_diff_gradient, no_grad

LOG_2PI = np.log(2 * np.pi)


def make_head(n_experts=4, n_components=5, dim=8, d_action=3, seed=0):
    return MoeMdnHead(dim=dim, d_action=d_action, n_experts=n_experts,
                      n_components=n_components, hidden=16, sigma_min=1e-4,
                      rng=np.random.default_rng(seed))


def head_with_gate_probs(target):
    """A head whose gate emits ``target`` for features pooling to e_0."""
    head = make_head(n_experts=len(target))
    head.gate_weights.data[:] = 0.0
    head.gate_weights.data[0, :] = np.log(target)
    x = np.zeros((5, 8))
    x[:, 0] = 1.0
    return head, x


class TestGate:
    def test_zero_weights_uniform(self):
        head = make_head()
        head.gate_weights.data[:] = 0.0
        d = head.gate(np.random.default_rng(0).normal(size=(5, 8)), "training")
        assert np.allclose(d.g, 0.25, atol=1e-12)

    def test_training_top2_renormalization(self):
        head, x = head_with_gate_probs([0.5, 0.3, 0.15, 0.05])
        d = head.gate(x, "training")
        assert np.allclose(d.g, [0.5, 0.3, 0.15, 0.05], atol=1e-12)
        assert d.selected == (0, 1)
        assert np.allclose(d.renormalized, [0.625, 0.375], atol=1e-12)

    def test_inference_top1(self):
        head, x = head_with_gate_probs([0.5, 0.3, 0.15, 0.05])
        d = head.gate(x, "inference")
        assert d.selected == (0,)
        assert np.allclose(d.renormalized, [1.0])

    def test_ties_break_to_lower_index(self):
        head, x = head_with_gate_probs([0.25, 0.25, 0.25, 0.25])
        assert head.gate(x, "training").selected == (0, 1)
        assert head.gate(x, "inference").selected == (0,)

    def test_monolithic_single_expert(self):
        head = make_head(n_experts=1)
        d = head.gate(np.zeros((5, 8)), "training")
        assert d.selected == (0,) and np.allclose(d.renormalized, [1.0])

    def test_simplex_invariants(self):
        rng = np.random.default_rng(1)
        head = make_head()
        for _ in range(20):
            d = head.gate(rng.normal(size=(5, 8)), "training")
            assert d.g.sum() == pytest.approx(1.0, abs=1e-12)
            assert d.renormalized.sum() == pytest.approx(1.0, abs=1e-12)


class TestExpertForward:
    def test_sigma_at_zero_log_std(self):
        head = make_head()
        e = head._experts[0]
        e["w2"].data[:] = 0.0
        e["b2"].data[:] = 0.0
        params = head.expert_forward(0, np.random.default_rng(0).normal(size=(6, 8)))
        assert np.allclose(params.sigma.data, 1.0001, atol=1e-12)
        assert np.allclose(params.pi.data, 0.2, atol=1e-12)  # M=5 uniform

    def test_shapes(self):
        head = make_head()
        params = head.expert_forward(1, np.zeros((6, 8)))
        assert params.pi.shape == (6, 5)
        assert params.mu.shape == (6, 5, 3)
        assert params.sigma.shape == (6, 5, 3)

    def test_pi_rows_on_simplex_sigma_positive(self):
        rng = np.random.default_rng(2)
        head = make_head()
        params = head.expert_forward(2, rng.normal(size=(6, 8)) * 3)
        assert np.allclose(params.pi.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(params.sigma.data >= 1e-4)


def manual_params(pi, mu, sigma):
    pi = np.asarray(pi, float)
    return GmmParams(pi=Tensor(pi), log_pi=Tensor(np.log(pi)),
                     mu=Tensor(np.asarray(mu, float)),
                     sigma=Tensor(np.asarray(sigma, float)))


class TestJointLogDensity:
    def test_perfect_unit_gaussian(self):
        head = make_head(n_components=1)
        eps = np.random.default_rng(0).normal(size=(4, 3))
        params = manual_params(np.ones((4, 1)), eps[:, None, :], np.ones((4, 1, 3)))
        out = head.joint_log_density(eps, {0: params}, np.array([1.0]))
        assert out.item() == pytest.approx(-(4 * 3 / 2) * LOG_2PI, abs=1e-12)

    def test_identical_experts_collapse(self):
        head = make_head()
        rng = np.random.default_rng(1)
        eps = rng.normal(size=(4, 3))
        x = rng.normal(size=(4, 8))
        pa = head.expert_forward(0, x)
        single = head.joint_log_density(eps, {0: pa}, np.array([1.0]))
        both = head.joint_log_density(eps, {0: pa, 1: pa}, np.array([0.5, 0.5]))
        assert both.item() == pytest.approx(single.item(), abs=1e-12)

    def test_matches_naive_high_precision_oracle(self):
        mp.mp.dps = 60
        rng = np.random.default_rng(2)
        head = make_head(n_components=2, d_action=3)
        head.n_components = 2
        for _ in range(10):
            L, M, da = 2, 2, 3
            pi = rng.dirichlet(np.ones(M), size=L)
            mu = rng.normal(size=(L, M, da), scale=2.0)
            sigma = rng.uniform(0.05, 2.0, size=(L, M, da))
            pi2 = rng.dirichlet(np.ones(M), size=L)
            mu2 = rng.normal(size=(L, M, da), scale=2.0)
            sigma2 = rng.uniform(0.05, 2.0, size=(L, M, da))
            eps = rng.normal(size=(L, da))
            gp = rng.dirichlet(np.ones(2))
            mine = head.joint_log_density(
                eps, {0: manual_params(pi, mu, sigma),
                      2: manual_params(pi2, mu2, sigma2)}, gp).item()

            def dens(pi_, mu_, sig_):
                prod = mp.mpf(1)
                for t in range(L):
                    s = mp.mpf(0)
                    for m in range(M):
                        d = mp.mpf(1)
                        for a in range(da):
                            z = (mp.mpf(eps[t, a]) - mp.mpf(mu_[t, m, a])) / mp.mpf(sig_[t, m, a])
                            d *= mp.e ** (-z * z / 2) / (mp.sqrt(2 * mp.pi) * mp.mpf(sig_[t, m, a]))
                        s += mp.mpf(pi_[t, m]) * d
                    prod *= s
                return prod

            oracle = float(mp.log(mp.mpf(gp[0]) * dens(pi, mu, sigma) +
                                  mp.mpf(gp[1]) * dens(pi2, mu2, sigma2)))
            assert abs(mine - oracle) <= 1e-9

    def test_sigma_below_min_rejected(self):
        from moepolicy.errors import InvariantViolationError
        head = make_head()
        eps = np.zeros((2, 3))
        bad = manual_params(np.ones((2, 1)), np.zeros((2, 1, 3)),
                            np.full((2, 1, 3), 1e-6))
        with pytest.raises(InvariantViolationError):
            head.joint_log_density(eps, {0: bad}, np.array([1.0]))


class TestMdnNll:
    def test_is_negative_joint(self):
        head = make_head()
        rng = np.random.default_rng(3)
        eps = rng.normal(size=(4, 3))
        params = {0: head.expert_forward(0, rng.normal(size=(4, 8)))}
        j = head.joint_log_density(eps, params, np.array([1.0]))
        n = head.mdn_nll(eps, params, np.array([1.0]))
        assert n.item() == pytest.approx(-j.item(), abs=1e-15)

    def test_moving_mean_toward_target_decreases_loss(self):
        head = make_head(n_components=1)
        eps = np.full((3, 3), 0.7)
        losses = []
        for lam in np.linspace(0.0, 1.0, 7):
            params = manual_params(np.ones((3, 1)),
                                   np.broadcast_to(lam * 0.7, (3, 1, 3)).copy(),
                                   np.ones((3, 1, 3)))
            losses.append(head.mdn_nll(eps, {0: params}, np.array([1.0])).item())
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_gradients_match_finite_differences(self):
        # load term excluded: its value intentionally tracks non-differentiable
        # counts while its gradient flows through the smooth proxy
        head = make_head(n_experts=3, n_components=2, dim=6, d_action=2, seed=5)
        rng = np.random.default_rng(6)
        x_feat = rng.normal(size=(2, 4, 6))
        eps = rng.normal(size=(2, 4, 2))
        params = head.parameters()

        def loss_fn():
            return head.training_losses(Tensor(x_feat), eps, 0.0, 0.01).mixture

        grads = backward(loss_fn(), params=params)
        fd = finite_diff_gradient(loss_fn, params, h=1e-5, max_coords=5)
        checked = 0
        for p in params:
            mask = ~np.isnan(fd[p])
            got, want = grads[p][mask], fd[p][mask]
            denom = np.maximum(1e-3, np.maximum(np.abs(got), np.abs(want)))
            assert np.max(np.abs(got - want) / denom) <= 1e-4
            checked += mask.sum()
        assert checked > 0


class TestAuxLoss:
    def test_uniform_is_zero(self):
        head = make_head()
        probs = Tensor(np.full((8, 4), 0.25))
        sels = [(i % 4, (i + 1) % 4) for i in range(8)]
        out = head.aux_loss(probs, sels, 1.0, 1.0)
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_coefficients(self):
        head = make_head()
        probs = Tensor(np.random.default_rng(0).dirichlet(np.ones(4), size=6))
        sels = [(0, 1)] * 6
        assert head.aux_loss(probs, sels, 0.0, 0.0).item() == 0.0

    def test_concentrated_batch_cv2_three(self):
        # all mass and all selections on expert 0, batch of 8: CV^2 = 3 each
        head = make_head()
        g = np.zeros((8, 4))
        g[:, 0] = 1.0
        out = head.aux_loss(Tensor(g), [(0,)] * 8, 0.25, 0.5)
        assert out.item() == pytest.approx(3 * (0.25 + 0.5), abs=1e-9)

    def test_empty_batch_rejected(self):
        head = make_head()
        with pytest.raises(InvalidInputError):
            head.aux_loss(Tensor(np.zeros((0, 4))), [], 0.1, 0.1)

    def test_load_value_uses_counts_gradient_uses_proxy(self):
        head = make_head()
        probs_np = np.random.default_rng(4).dirichlet(np.ones(4), size=6)
        sels = [(0, 1)] * 6          # counts [6, 6, 0, 0] -> CV^2 = 1
        logits = Tensor(np.log(probs_np), requires_grad=True)
        probs = logits.exp()
        out = head.aux_loss(probs, sels, 1.0, 0.0)
        assert out.item() == pytest.approx(1.0, abs=1e-12)
        grads = backward(out)
        assert logits.grad is not None and np.any(logits.grad != 0.0)


class TestPredictNoise:
    def test_single_component_returns_mu(self):
        head = make_head(n_components=1)
        x = np.random.default_rng(0).normal(size=(4, 8))
        with no_grad():
            d = head.gate(x, "inference")
            mu = head.expert_forward(d.selected[0], x).mu.data[:, 0, :]
        assert np.array_equal(head.predict_noise(x), mu)

    def test_sparsity_other_experts_irrelevant(self):
        head = make_head()
        x = np.random.default_rng(1).normal(size=(4, 8))
        base = head.predict_noise(x)
        i_star = head.gate(x, "inference").selected[0]
        rng = np.random.default_rng(2)
        for i, e in enumerate(head._experts):
            if i != i_star:
                for key in e:
                    e[key].data += rng.normal(size=e[key].shape)
        assert np.array_equal(head.predict_noise(x), base)

    def test_component_argmax(self):
        head = make_head(n_experts=1, n_components=3)
        pi = np.array([[0.2, 0.5, 0.3]])
        comp = np.argmax(pi, axis=-1)
        assert comp[0] == 1


class TestTrainingLosses:
    def test_identical_experts_equal_losses(self):
        head = make_head(n_experts=2, seed=7)
        for key in head._experts[0]:
            head._experts[1][key].data[:] = head._experts[0][key].data
        rng = np.random.default_rng(8)
        out = head.training_losses(Tensor(rng.normal(size=(3, 4, 8))),
                                   rng.normal(size=(3, 4, 3)), 0.0, 0.0)
        l0, l1 = out.per_expert[out.active[0]], out.per_expert[out.active[1]]
        assert l0.item() == pytest.approx(l1.item(), abs=1e-12)

    def test_monolithic_expert_loss_equals_mixture(self):
        head = make_head(n_experts=1, seed=9)
        rng = np.random.default_rng(10)
        out = head.training_losses(Tensor(rng.normal(size=(2, 4, 8))),
                                   rng.normal(size=(2, 4, 3)), 0.0, 0.0)
        assert out.per_expert[0].item() == pytest.approx(out.mixture.item(), abs=1e-12)

    def test_mixture_bound(self):
        # p_mix >= min_j g'_j * p_i for every active expert i (batch of one)
        head = make_head(seed=11)
        rng = np.random.default_rng(12)
        out = head.training_losses(Tensor(rng.normal(size=(1, 4, 8))),
                                   rng.normal(size=(1, 4, 3)), 0.0, 0.0)
        p_mix = np.exp(-out.mixture.item())
        d = out.decisions[0]
        gmin = min(d.renormalized)
        for i in out.active:
            assert p_mix >= gmin * np.exp(-out.per_expert[i].item()) - 1e-12

    def test_exactly_two_active_experts(self):
        head = make_head()
        rng = np.random.default_rng(13)
        out = head.training_losses(Tensor(rng.normal(size=(4, 4, 8))),
                                   rng.normal(size=(4, 4, 3)), 0.01, 0.01)
        assert len(out.active) == 2
        assert len(out.per_expert) == 2
        assert len(out.decisions) == 4
