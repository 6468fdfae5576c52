import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctlmtnet import ops
from ctlmtnet.losses import margin_loss
from ctlmtnet.model import (
    ConfigurationError, CpacConfig, ablation_config, capsule_self_attention, cnn_pool_block, cpac_forward,
    dynamic_routing, init_params, predict, predict_vectors, primary_caps, squash,
)
from ctlmtnet.tensor import ContractError, Tensor, backward

TINY = CpacConfig(num_classes=5, input_frames=16, conv_filters=8, num_primary_caps=4, primary_dim=4, digit_dim=4)


def oracle_squash(s):
    n2 = float(s @ s)
    return s * (np.sqrt(n2) / (1.0 + n2))


class TestSquash:
    def test_examples(self):
        np.testing.assert_allclose(squash(np.array([3.0, 4.0])).data, [0.0, 0.0] + np.array([3, 4]) * 25 / 26 / 5)
        np.testing.assert_array_equal(squash(np.zeros(4)).data, 0.0)
        np.testing.assert_allclose(squash(np.array([1.0, 0.0])).data, [0.5, 0.0])

    @given(arrays(np.float64, 6, elements=st.floats(-50, 50)))
    @settings(max_examples=200, deadline=None)
    def test_matches_formula_and_preserves_direction(self, s):
        out = squash(s).data
        np.testing.assert_allclose(out, oracle_squash(s), rtol=1e-12, atol=1e-300)
        assert np.linalg.norm(out) < 1.0
        if np.linalg.norm(s) > 1e-6:
            assert out @ s >= 0


class TestAttention:
    def proj(self, rng, d):
        return tuple(rng.standard_normal((d, d)) for _ in range(3))

    def test_single_capsule_is_identity(self):
        rng = np.random.default_rng(0)
        caps = rng.standard_normal((2, 1, 5))
        out, w = capsule_self_attention(caps, self.proj(rng, 5), return_weights=True)
        np.testing.assert_array_equal(w.data, 1.0)
        np.testing.assert_allclose(out.data, caps, rtol=0, atol=0)

    def test_identical_rows_average_to_themselves(self):
        rng = np.random.default_rng(1)
        caps = np.repeat(rng.standard_normal((1, 1, 4)), 6, axis=1)
        out, w = capsule_self_attention(caps, self.proj(rng, 4), return_weights=True)
        np.testing.assert_allclose(w.data, 1 / 6, atol=1e-15)
        np.testing.assert_allclose(out.data, caps, atol=1e-14)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        _, w = capsule_self_attention(rng.standard_normal((3, 9, 4)) * 4, self.proj(rng, 4), return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_oracle(self):
        rng = np.random.default_rng(3)
        caps = rng.standard_normal((1, 4, 3))
        q, k, v = self.proj(rng, 3)
        u = caps[0]
        logits = (u @ q) @ (u @ k).T / np.sqrt(3)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(capsule_self_attention(caps, (q, k, v)).data[0], w @ u, rtol=1e-12)
        np.testing.assert_allclose(
            capsule_self_attention(caps, (q, k, v), output="qkv_then_opri").data[0], (w @ (u @ v)) * u, rtol=1e-12
        )

    def test_bad_projection_shape(self):
        with pytest.raises(ConfigurationError):
            capsule_self_attention(np.ones((1, 2, 3)), (np.eye(3), np.eye(3), np.eye(4)))


class TestRouting:
    def test_one_iteration_uses_uniform_couplings(self):
        rng = np.random.default_rng(4)
        u = rng.standard_normal((2, 6, 3))
        w = rng.standard_normal((3, 4, 5, 3))
        u_hat = predict_vectors(u, w).data
        expected = np.stack([[oracle_squash(u_hat[b, :, j].sum(axis=0) / 4) for j in range(4)] for b in range(2)])
        np.testing.assert_allclose(dynamic_routing(u, w, iters=1).data, expected, rtol=1e-12)

    def test_predict_vectors_type_sharing(self):
        rng = np.random.default_rng(5)
        u = rng.standard_normal((1, 6, 3))
        w = rng.standard_normal((2, 3, 4, 3))
        u_hat = predict_vectors(u, w).data
        for i in range(6):
            for j in range(3):
                np.testing.assert_allclose(u_hat[0, i, j], w[i % 2, j] @ u[0, i], rtol=1e-12)

    def test_single_input_capsule_fixed_point(self):
        rng = np.random.default_rng(6)
        u = rng.standard_normal((1, 1, 3))
        w = rng.standard_normal((1, 4, 2, 3))
        v, cs = dynamic_routing(u, w, iters=5, return_couplings=True)
        for c in cs:
            np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-12)
        u_hat = predict_vectors(u, w).data[0, 0]
        c_last = cs[-1][0, 0]
        np.testing.assert_allclose(v.data[0], np.stack([oracle_squash(c_last[j] * u_hat[j]) for j in range(4)]), rtol=1e-10)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ContractError):
            dynamic_routing(np.ones((1, 2, 3)), np.ones((1, 2, 2, 3)), iters=0)

    def test_incomplete_types_rejected(self):
        with pytest.raises(ConfigurationError):
            predict_vectors(np.ones((1, 5, 3)), np.ones((2, 2, 2, 3)))


class TestBlocks:
    def test_cnn_pool_block_shape(self):
        cfg = CpacConfig(num_blocks=1, conv_filters=6)
        p = init_params(cfg)
        out = cnn_pool_block(np.random.default_rng(0).standard_normal((2, 64, 40, 1)), p, 1, mode="eval")
        assert out.shape == (2, 32, 20, 6)

    def test_three_blocks_shape(self):
        cfg = CpacConfig(input_frames=64, num_coeffs=40, conv_filters=4)
        assert cfg.frontend_shape() == (8, 5, 4)

    def test_zero_input_propagates_to_zero_at_init(self):
        # beta=0 and elu(0)=0 keep an all-zero map zero through eval-mode blocks
        p = init_params(TINY, seed=1)
        out = cnn_pool_block(np.zeros((1, 16, 39, 1)), p, 1, mode="eval")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_primary_caps_are_squashed(self):
        p = init_params(TINY)
        fmap = np.random.default_rng(1).standard_normal((2,) + TINY.frontend_shape()) * 5
        caps = primary_caps(fmap, p, TINY).data
        assert caps.shape == (2, TINY.num_input_caps(), TINY.primary_dim)
        assert (np.linalg.norm(caps, axis=-1) < 1).all()

    def test_too_small_input(self):
        with pytest.raises(ConfigurationError):
            CpacConfig(input_frames=4).frontend_shape()


class TestForward:
    def batch(self, n=3, seed=0):
        return np.random.default_rng(seed).standard_normal((n, TINY.input_frames, TINY.num_coeffs))

    def test_output_shapes_and_simplex(self):
        out = cpac_forward(self.batch(), init_params(TINY), TINY)
        assert out.digit_caps.shape == (3, 5, 4) and out.embedding.shape == (3, 20)
        np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-12)
        assert ((out.lengths.data >= 0) & (out.lengths.data < 1)).all()

    def test_eval_mode_batch_equivariance(self):
        p = init_params(TINY, seed=2)
        x = self.batch(4, 1)
        full = cpac_forward(x, p, TINY).probs.data
        singles = np.concatenate([cpac_forward(x[i : i + 1], p, TINY).probs.data for i in range(4)])
        np.testing.assert_allclose(full, singles, rtol=1e-12)

    def test_wrong_frame_count(self):
        with pytest.raises(ContractError):
            cpac_forward(np.zeros((1, 17, 39)), init_params(TINY), TINY)

    def test_mixed_batch_rejected(self):
        with pytest.raises(ContractError):
            cpac_forward([np.zeros((16, 39)), np.zeros((15, 39))], init_params(TINY), TINY)

    def test_end_to_end_margin_gradient_reaches_every_parameter(self):
        p = init_params(TINY, seed=3)
        out = cpac_forward(self.batch(4, 2), p, TINY, mode="train", rng=np.random.default_rng(0))
        backward(margin_loss(out.digit_caps, [0, 1, 2, 3]))
        for name, t in p.trainable().items():
            if name == "attention.value":  # unused by the default attention output
                continue
            assert t.grad is not None and np.isfinite(t.grad).all(), name
            assert np.abs(t.grad).sum() > 0, name

    @pytest.mark.parametrize("alg, gone, new", [
        (1, "block1.kernel", "frontend.kernel"),
        (2, "attention.query", None),
        (3, "routing.transforms", "recurrent.hidden"),
    ])
    def test_ablation_parameters(self, alg, gone, new):
        full = init_params(TINY, seed=0)
        ab = init_params(ablation_config(TINY, alg), seed=0)
        assert gone in full and gone not in ab
        if new:
            assert new in ab
        # untouched components keep a byte-identical init
        np.testing.assert_array_equal(full["primary.bias"].data, ab["primary.bias"].data)
        if alg != 1:
            np.testing.assert_array_equal(full["block2.kernel"].data, ab["block2.kernel"].data)

    @pytest.mark.parametrize("alg", [1, 2, 3])
    def test_ablations_run(self, alg):
        cfg = ablation_config(TINY, alg)
        out = cpac_forward(self.batch(), init_params(cfg), cfg)
        assert out.probs.shape == (3, 5)

    def test_unknown_ablation(self):
        with pytest.raises(ConfigurationError):
            ablation_config(TINY, 4)


def test_predict_ties_go_low():
    assert predict(np.array([0.2, 0.5, 0.5])) == 1
    np.testing.assert_array_equal(predict(np.array([[1.0, 1.0], [0.0, 2.0]])), [0, 1])
    assert predict(Tensor(np.array([3.0, 1.0]))) == 0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        CpacConfig(num_classes=0)
    with pytest.raises(ConfigurationError):
        CpacConfig(frontend="lstm")
    assert CpacConfig.from_dict(TINY.to_dict()) == TINY


def test_squash_via_ops_matches_model():
    s = np.random.default_rng(9).standard_normal((3, 7))
    np.testing.assert_array_equal(squash(s).data, ops.squash(s).data)
