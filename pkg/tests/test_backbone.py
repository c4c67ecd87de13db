"""Timestep embedding, condition assembly, denoiser contracts."""

import numpy as np
import pytest

from moepolicy.backbone import DenoiserBackbone, build_condition, timestep_embed
from moepolicy.errors import InvalidInputError
from moepolicy.tensor import SHARED, Tensor, backward, finite_diff_gradient


def make_backbone(seed=0):
    return DenoiserBackbone(d_action=4, d_condition=12, d_token=8, dim=16,
                            horizon=6, k_max=100, n_heads=2, n_kv_groups=1,
                            n_blocks=2, rng=np.random.default_rng(seed))


class TestTimestepEmbed:
    def test_zero_step(self):
        e = timestep_embed(0, 8, 100)
        assert np.all(e[:4] == 0.0) and np.all(e[4:] == 1.0)

    def test_dimension(self):
        assert timestep_embed(5, 32, 100).shape == (32,)

    def test_injective_over_range(self):
        embs = np.stack([timestep_embed(k, 16, 100) for k in range(101)])
        dists = np.linalg.norm(embs[:, None] - embs[None, :], axis=-1)
        dists[np.diag_indices(101)] = np.inf
        assert dists.min() > 1e-6

    def test_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            timestep_embed(101, 8, 100)
        with pytest.raises(InvalidInputError):
            timestep_embed(-1, 8, 100)


class TestBuildCondition:
    def test_zero_proprio_tail(self):
        z = Tensor(np.random.default_rng(0).normal(size=(2, 5, 8)))
        s = build_condition(z, np.zeros((2, 4))).data
        assert s.shape == (2, 12)
        assert np.all(s[:, 8:] == 0.0)

    def test_pooling_is_arithmetic_mean(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(3, 5, 8))
        s = build_condition(Tensor(z), rng.normal(size=(3, 4))).data
        assert np.allclose(s[:, :8], z.mean(axis=1), atol=1e-12)

    def test_batch_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            build_condition(Tensor(np.zeros((2, 5, 8))), np.zeros((3, 4)))


class TestDenoiser:
    def test_output_shape(self):
        bb = make_backbone()
        rng = np.random.default_rng(0)
        out = bb(rng.normal(size=(3, 6, 4)), 10, Tensor(rng.normal(size=(3, 12))))
        assert out.shape == (3, 6, 16)

    def test_changing_k_changes_features(self):
        bb = make_backbone()
        rng = np.random.default_rng(1)
        a = rng.normal(size=(1, 6, 4))
        s = Tensor(rng.normal(size=(1, 12)))
        x1 = bb(a, 10, s).data
        x2 = bb(a, 11, s).data
        assert np.max(np.abs(x1 - x2)) > 0

    def test_deterministic(self):
        bb = make_backbone()
        rng = np.random.default_rng(2)
        a = rng.normal(size=(2, 6, 4))
        s = rng.normal(size=(2, 12))
        assert np.array_equal(bb(a, 5, Tensor(s)).data, bb(a, 5, Tensor(s)).data)

    def test_all_parameters_shared_partition(self):
        bb = make_backbone()
        assert all(p.partition == SHARED for p in bb.parameters())

    def test_wrong_shape_rejected(self):
        bb = make_backbone()
        with pytest.raises(InvalidInputError):
            bb(np.zeros((1, 5, 4)), 0, Tensor(np.zeros((1, 12))))

    def test_gradients_match_finite_differences(self):
        bb = DenoiserBackbone(d_action=2, d_condition=5, d_token=4, dim=8,
                              horizon=3, k_max=10, n_heads=2, n_kv_groups=1,
                              n_blocks=1, rng=np.random.default_rng(3))
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 3, 2))
        s = rng.normal(size=(2, 5))
        weights = rng.normal(size=(2, 3, 8))

        def loss_fn():
            return (bb(a, 4, Tensor(s)) * Tensor(weights)).sum()

        params = bb.parameters()
        grads = backward(loss_fn(), params=params)
        fd = finite_diff_gradient(loss_fn, params, h=1e-5, max_coords=4)
        for p in params:
            mask = ~np.isnan(fd[p])
            got, want = grads[p][mask], fd[p][mask]
            denom = np.maximum(1e-3, np.maximum(np.abs(got), np.abs(want)))
            assert np.max(np.abs(got - want) / denom) <= 1e-4
