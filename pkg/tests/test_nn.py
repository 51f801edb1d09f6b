import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from deep_ucsl import nn
from deep_ucsl.nn import ModelConfig, backward, cluster_probs, encode, expert_probs, grad_check, init_params

from conftest import manual_params, random_labels, random_q


def _zero_like(params):
    return params.with_arrays([np.zeros_like(a) for a in params.arrays()])


class TestModelConfig:
    def test_rejects_k_below_two(self):
        with pytest.raises(ValueError):
            ModelConfig(input_dim=3, k_subgroups=1)

    @pytest.mark.parametrize("kw", [{"input_dim": 0}, {"input_dim": 3, "repr_dim": 0}, {"input_dim": 3, "hidden_dims": (4, 0)}])
    def test_rejects_zero_dims(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_rejects_unknown_activation(self):
        with pytest.raises(ValueError):
            ModelConfig(input_dim=3, activation="gelu")


class TestInitParams:
    cfg = ModelConfig(input_dim=4, hidden_dims=(3,), repr_dim=2, k_subgroups=2, seed=7)

    def test_shapes(self):
        p = init_params(self.cfg)
        assert [(w.shape, b.shape) for w, b in p.encoder] == [((3, 4), (3,)), ((2, 3), (2,))]
        for w, b in (p.expert_head, p.cluster_head):
            assert w.shape == (2, 2) and b.shape == (2,)

    def test_deterministic(self):
        a, b = init_params(self.cfg), init_params(self.cfg)
        for x, y in zip(a.arrays(), b.arrays()):
            assert np.array_equal(x, y)

    def test_seed_sensitive(self):
        a = init_params(self.cfg)
        b = init_params(ModelConfig(input_dim=4, hidden_dims=(3,), repr_dim=2, k_subgroups=2, seed=8))
        assert not np.array_equal(a.encoder[0][0], b.encoder[0][0])

    def test_fan_in_bound_and_zero_bias(self):
        p = init_params(ModelConfig(input_dim=50, hidden_dims=(40,), repr_dim=10, seed=1))
        for w, b in p.encoder:
            assert np.abs(w).max() <= 1 / np.sqrt(w.shape[1])
            assert abs(w.mean()) < 0.02
            assert not b.any()


class TestEncode:
    def test_zero_weights_give_zero(self):
        p = _zero_like(init_params(ModelConfig(input_dim=5, hidden_dims=(4, 3), repr_dim=2)))
        z = encode(p, np.random.default_rng(0).normal(size=(6, 5)))
        assert np.array_equal(z, np.zeros((6, 2)))

    def test_identity_layer(self):
        p = manual_params([(np.eye(3), np.zeros(3))], (np.zeros((2, 3)), np.zeros(2)), (np.zeros((2, 3)), np.zeros(2)))
        x = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(encode(p, x), x)

    @pytest.mark.parametrize("act", ["relu", "tanh"])
    def test_matches_hand_evaluation(self, act):
        p = init_params(ModelConfig(input_dim=4, hidden_dims=(6, 5), repr_dim=3, activation=act, seed=2))
        x = np.random.default_rng(2).normal(size=(5, 4))
        f = (lambda v: np.maximum(v, 0)) if act == "relu" else np.tanh
        (w0, b0), (w1, b1), (w2, b2) = p.encoder
        expected = f(f(x @ w0.T + b0) @ w1.T + b1) @ w2.T + b2
        np.testing.assert_allclose(encode(p, x), expected, rtol=1e-14, atol=1e-14)

    def test_width_mismatch(self):
        p = init_params(ModelConfig(input_dim=4))
        with pytest.raises(ValueError, match="shape"):
            encode(p, np.zeros((2, 5)))

    def test_pure(self):
        p = init_params(ModelConfig(input_dim=4, seed=3))
        x = np.random.default_rng(3).normal(size=(7, 4))
        assert np.array_equal(encode(p, x), encode(p, x))


class TestHeads:
    def _params(self, k=2, r=2, seed=0):
        return init_params(ModelConfig(input_dim=3, hidden_dims=(), repr_dim=r, k_subgroups=k, seed=seed))

    def test_zero_expert_head_is_half(self):
        p = _zero_like(self._params(k=3))
        assert np.array_equal(expert_probs(p, np.ones((4, 2))), np.full((4, 3), 0.5))

    def test_logit_clamp(self):
        p = self._params()
        p = p.with_arrays(p.arrays()[:2] + [np.zeros((2, 2)), np.array([30.0, 1e6]), np.zeros((2, 2)), np.zeros(2)])
        out = expert_probs(p, np.zeros((1, 2)))
        assert np.all(out >= 1 - 1e-9) and np.all(out < 1)

    def test_sigmoid_oracle(self):
        p = self._params(k=3, r=4, seed=5)
        z = np.random.default_rng(5).normal(size=(3, 4))
        w, b = p.expert_head
        out = expert_probs(p, z)
        for i in range(3):
            for k in range(3):
                a = float(z[i] @ w[k] + b[k])
                assert out[i, k] == pytest.approx(1 / (1 + np.exp(-a)), rel=1e-14)

    def test_zero_cluster_head_uniform(self):
        p = _zero_like(self._params(k=4))
        assert np.allclose(cluster_probs(p, np.ones((3, 2))), 0.25)

    def test_softmax_example(self):
        row = nn.softmax(np.array([[10.0, 0.0]]))[0]
        np.testing.assert_allclose(row, [0.99995, 0.00005], atol=1e-4)

    @given(st.integers(0, 10_000), st.integers(2, 5), st.floats(0.1, 100))
    def test_row_sums_and_open_interval(self, seed, k, scale):
        p = self._params(k=k, r=3, seed=seed)
        z = np.random.default_rng(seed).normal(scale=scale, size=(6, 3))
        s = cluster_probs(p, z)
        assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-9)
        e = expert_probs(p, z)
        assert np.all((e > 0) & (e < 1))

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            expert_probs(self._params(r=2), np.zeros((1, 3)))
        with pytest.raises(ValueError):
            cluster_probs(self._params(r=2), np.zeros((1, 3)))


class TestBackward:
    def test_zero_weights_zero_gradient(self):
        rng = np.random.default_rng(0)
        p = init_params(ModelConfig(input_dim=3, hidden_dims=(4,), repr_dim=2, k_subgroups=3))
        g, loss = backward(p, rng.normal(size=(5, 3)), random_labels(rng, 5), random_q(rng, 5, 3), (0, 0))
        assert loss == 0 and all(not a.any() for a in g.arrays())

    def test_logistic_regression_single_sample(self):
        # K=1, linear encoder: expert logit a = v.(Wx + c) + d; dL/dv = (p - t) z etc.
        rng = np.random.default_rng(1)
        W, c = rng.normal(size=(2, 3)), rng.normal(size=2)
        v, d = rng.normal(size=(1, 2)), np.array([0.3])
        p = manual_params([(W, c)], (v, d), (np.zeros((1, 2)), np.zeros(1)))
        x = rng.normal(size=(1, 3))
        z = x @ W.T + c
        prob = 1 / (1 + np.exp(-(z @ v.T + d)))[0, 0]
        t = 1.0
        g, loss = backward(p, x, np.array([1]), np.ones((1, 1)), (1, 0))
        assert loss == pytest.approx(-np.log(prob), rel=1e-12)
        np.testing.assert_allclose(g.expert_head[0], (prob - t) * z, rtol=1e-12)
        np.testing.assert_allclose(g.expert_head[1], [prob - t], rtol=1e-12)
        np.testing.assert_allclose(g.encoder[0][0], (prob - t) * np.outer(v[0], x[0]), rtol=1e-12)
        np.testing.assert_allclose(g.encoder[0][1], (prob - t) * v[0], rtol=1e-12)

    def test_both_heads_reach_encoder(self):
        rng = np.random.default_rng(2)
        p = init_params(ModelConfig(input_dim=3, hidden_dims=(), repr_dim=2, seed=2))
        x, y, q = rng.normal(size=(4, 3)), random_labels(rng, 4), random_q(rng, 4, 2)
        g_moe = backward(p, x, y, q, (1, 0))[0].encoder[0][0]
        g_clu = backward(p, x, y, q, (0, 1))[0].encoder[0][0]
        g_both = backward(p, x, y, q, (1, 1))[0].encoder[0][0]
        assert np.abs(g_moe).sum() > 0 and np.abs(g_clu).sum() > 0
        np.testing.assert_allclose(g_both, g_moe + g_clu, atol=1e-15)

    def test_rejects_bad_q(self):
        p = init_params(ModelConfig(input_dim=2, hidden_dims=(), repr_dim=2))
        with pytest.raises(ValueError, match="rows"):
            backward(p, np.zeros((1, 2)), np.array([1]), np.array([[0.7, 0.7]]))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_names_term(self):
        p = init_params(ModelConfig(input_dim=2, hidden_dims=(), repr_dim=2))
        x = np.array([[np.inf, 0.0]])
        with pytest.raises(FloatingPointError, match="moe_loss|clustering_loss"):
            backward(p, x, np.array([1]), np.array([[0.5, 0.5]]))


class TestGradCheck:
    def test_zero_weights_zero_error(self):
        rng = np.random.default_rng(0)
        p = init_params(ModelConfig(input_dim=3, hidden_dims=(3,), repr_dim=2))
        assert grad_check(p, rng.normal(size=(4, 3)), random_labels(rng, 4), random_q(rng, 4, 2), loss_weights=(0, 0)) == 0

    def test_b8_k3(self):
        rng = np.random.default_rng(1)
        p = init_params(ModelConfig(input_dim=5, hidden_dims=(6,), repr_dim=4, k_subgroups=3, seed=1))
        err = grad_check(p, rng.normal(size=(8, 5)), random_labels(rng, 8), random_q(rng, 8, 3), step=1e-4)
        assert err < 1e-4

    def test_sabotage_detected(self):
        rng = np.random.default_rng(2)
        p = init_params(ModelConfig(input_dim=5, hidden_dims=(6,), repr_dim=4, k_subgroups=3, seed=2))
        x, y, q = rng.normal(size=(8, 5)), random_labels(rng, 8), random_q(rng, 8, 3)
        g, _ = backward(p, x, y, q)
        arrays = [a.copy() for a in g.arrays()]
        arrays[2].flat[np.argmax(np.abs(arrays[2]))] *= 2
        assert grad_check(p, x, y, q, grads=g.with_arrays(arrays)) > 0.3

    def test_step_range(self):
        p = init_params(ModelConfig(input_dim=2, hidden_dims=(), repr_dim=2))
        with pytest.raises(ValueError):
            grad_check(p, np.zeros((1, 2)), np.array([1]), np.array([[0.5, 0.5]]), step=1e-2)

    @given(
        seed=st.integers(0, 2**32 - 1),
        k=st.integers(2, 5),
        b=st.integers(1, 16),
        hidden=st.lists(st.integers(1, 6), max_size=2),
        act=st.sampled_from(["relu", "tanh"]),
    )
    def test_random_configurations(self, seed, k, b, hidden, act):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(input_dim=int(rng.integers(1, 6)), hidden_dims=tuple(hidden),
                          repr_dim=int(rng.integers(1, 5)), k_subgroups=k, activation=act, seed=seed)
        p = init_params(cfg)
        # non-zero biases keep pre-activations off the relu kink in generic draws
        p = p.with_arrays([a if a.ndim == 2 else rng.normal(scale=0.5, size=a.shape) for a in p.arrays()])
        x = rng.normal(size=(b, cfg.input_dim))
        if act == "relu":
            # central differences straddling max(0, .) are not a derivative oracle
            _, cache = nn._forward_encoder(p, x)
            assume(all(np.abs(pre).min() > 1e-3 for _, pre in cache[1:-1]))
        assert grad_check(p, x, random_labels(rng, b), random_q(rng, b, k), step=1e-4) < 1e-4
