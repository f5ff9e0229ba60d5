import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunecast.errors import ShapeError, TrainingError
from prunecast.kernels import (
    AdamState,
    ConvFilter,
    adam_step,
    causal_conv1d,
    causal_conv1d_backward,
    graph_conv,
    graph_conv_backward,
)
from tests.oracles import central_difference, conv_loop, graph_conv_loop, rel_error


def _filter(rng, c_out, c_in, k):
    return ConvFilter(rng.normal(size=(c_out, c_in, k)), rng.normal(size=c_out))


class TestCausalConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 3, 5))
        out = causal_conv1d(x, ConvFilter(np.ones((1, 1, 1)), np.zeros(1)))
        np.testing.assert_array_equal(out, x)

    def test_zero_filter_contracts_time(self, rng):
        x = rng.normal(size=(2, 3, 7))
        out = causal_conv1d(x, ConvFilter(np.zeros((4, 2, 3)), np.zeros(4)))
        assert out.shape == (4, 3, 5)
        assert not out.any()

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 8))
        f = _filter(rng, 4, 2, 3)
        np.testing.assert_allclose(causal_conv1d(x, f), conv_loop(x, f.weight, f.bias), atol=1e-12)

    def test_batched_matches_per_sample(self, rng):
        x = rng.normal(size=(3, 2, 4, 6))
        f = _filter(rng, 3, 2, 2)
        batched = causal_conv1d(x, f)
        for b in range(3):
            np.testing.assert_allclose(batched[b], causal_conv1d(x[b], f), atol=1e-13)

    @pytest.mark.parametrize("shape,c_in,k", [((3, 2, 5), 2, 3), ((2, 2, 2), 2, 3)])
    def test_shape_errors(self, rng, shape, c_in, k):
        with pytest.raises(ShapeError):
            causal_conv1d(rng.normal(size=shape), _filter(rng, 1, c_in, k))

    def test_linearity_without_bias(self, rng):
        x, y = rng.normal(size=(2, 2, 3, 9))
        f = ConvFilter(rng.normal(size=(3, 2, 4)), np.zeros(3))
        lhs = causal_conv1d(1.7 * x - 0.4 * y, f)
        rhs = 1.7 * causal_conv1d(x, f) - 0.4 * causal_conv1d(y, f)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestCausalConvBackward:
    def test_zero_grad(self, rng):
        x = rng.normal(size=(2, 3, 6))
        f = _filter(rng, 2, 2, 3)
        gx, gf = causal_conv1d_backward(x, f, np.zeros((2, 3, 4)))
        assert not gx.any() and not gf.weight.any() and not gf.bias.any()

    def test_identity_kernel_passes_grad(self, rng):
        x = rng.normal(size=(1, 2, 4))
        g = rng.normal(size=(1, 2, 4))
        gx, _ = causal_conv1d_backward(x, ConvFilter(np.ones((1, 1, 1)), np.zeros(1)), g)
        np.testing.assert_array_equal(gx, g)

    def test_grad_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            causal_conv1d_backward(rng.normal(size=(1, 2, 4)), _filter(rng, 1, 1, 2), np.zeros((1, 2, 4)))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_finite_differences(self, c_in, c_out, nodes, k, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(c_in, nodes, k + 1 + seed % 3))
        f = _filter(rng, c_out, c_in, k)
        g = rng.normal(size=causal_conv1d(x, f).shape)
        gx, gf = causal_conv1d_backward(x, f, g)

        def objective():
            return float(np.sum(g * causal_conv1d(x, f)))

        for arr, grad in ((x, gx), (f.weight, gf.weight), (f.bias, gf.bias)):
            for idx in np.ndindex(arr.shape):
                fd = central_difference(objective, arr, idx)
                assert rel_error(fd, grad[idx]) < 1e-4 or abs(fd - grad[idx]) < 1e-9


class TestGraphConv:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4, 5))
        np.testing.assert_allclose(graph_conv(x, np.eye(4), np.eye(3)), x, atol=1e-15)

    def test_zero_adjacency(self, rng):
        x = rng.normal(size=(2, 3, 4))
        assert not graph_conv(x, np.zeros((3, 3)), rng.normal(size=(2, 5))).any()

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4))
        a = rng.random((3, 3))
        w = rng.normal(size=(2, 3))
        np.testing.assert_allclose(graph_conv(x, a, w), graph_conv_loop(x, a, w), atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            graph_conv(rng.normal(size=(2, 3, 4)), np.eye(4), np.eye(2))
        with pytest.raises(ShapeError):
            graph_conv(rng.normal(size=(2, 3, 4)), np.eye(3), np.eye(3))

    def test_doubly_stochastic_preserves_channel_sum(self, rng):
        # symmetric doubly-stochastic: average of a permutation and its inverse plus identity
        perm = np.eye(5)[rng.permutation(5)]
        a = (np.eye(5) + perm + perm.T) / 3
        x = rng.normal(size=(3, 5, 6))
        out = graph_conv(x, a, np.eye(3))
        np.testing.assert_allclose(out.sum(axis=1), x.sum(axis=1), atol=1e-10)


class TestGraphConvBackward:
    def test_zero_grad(self, rng):
        gx, gw = graph_conv_backward(rng.normal(size=(2, 3, 4)), rng.random((3, 3)),
                                     rng.normal(size=(2, 2)), np.zeros((2, 3, 4)))
        assert not gx.any() and not gw.any()

    def test_identity_passes_grad(self, rng):
        g = rng.normal(size=(2, 3, 4))
        gx, _ = graph_conv_backward(rng.normal(size=(2, 3, 4)), np.eye(3), np.eye(2), g)
        np.testing.assert_allclose(gx, g, atol=1e-15)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_finite_differences(self, c_in, c_out, nodes, t_len, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(c_in, nodes, t_len))
        a = rng.random((nodes, nodes))
        w = rng.normal(size=(c_in, c_out))
        g = rng.normal(size=(c_out, nodes, t_len))
        gx, gw = graph_conv_backward(x, a, w, g)

        def objective():
            return float(np.sum(g * graph_conv(x, a, w)))

        for arr, grad in ((x, gx), (w, gw)):
            for idx in np.ndindex(arr.shape):
                fd = central_difference(objective, arr, idx)
                assert rel_error(fd, grad[idx]) < 1e-4 or abs(fd - grad[idx]) < 1e-9


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, AdamState())
        np.testing.assert_array_equal(new["w"], p["w"])
        assert not state.first_moment["w"].any() and not state.second_moment["w"].any()
        assert state.step_count == 1

    def test_first_step_is_full_lr(self):
        state = AdamState(lr=0.001)
        new, _ = adam_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, state)
        # bias-corrected moments are exactly g and g^2 on step 1
        assert new["p"] == pytest.approx(1.0 - 0.001 / (1.0 + 1e-8), abs=1e-15)

    def test_weight_decay_folds_into_gradient(self):
        new, state = adam_step({"p": np.array(2.0)}, {"p": np.array(0.0)}, AdamState(weight_decay=0.5))
        assert state.first_moment["p"] == pytest.approx(0.1 * 1.0)
        assert new["p"] < 2.0

    def test_symmetry(self, rng):
        p = {"a": np.array([0.3]), "b": np.array([0.3])}
        state = AdamState(weight_decay=5e-4)
        for _ in range(25):
            g = rng.normal(size=1)
            p, state = adam_step(p, {"a": g, "b": g.copy()}, state)
        np.testing.assert_array_equal(p["a"], p["b"])

    def test_deterministic(self, rng):
        p = {"w": rng.normal(size=(3, 2))}
        g = {"w": rng.normal(size=(3, 2))}
        a1, s1 = adam_step(p, g, AdamState())
        a2, s2 = adam_step(p, g, AdamState())
        assert a1["w"].tobytes() == a2["w"].tobytes()
        assert s1.second_moment["w"].tobytes() == s2.second_moment["w"].tobytes()

    def test_inputs_untouched(self):
        p = {"w": np.ones(2)}
        adam_step(p, {"w": np.ones(2)}, AdamState())
        np.testing.assert_array_equal(p["w"], np.ones(2))

    def test_non_finite_gradient_names_parameter(self):
        with pytest.raises(TrainingError, match="'bad'"):
            adam_step({"bad": np.ones(1)}, {"bad": np.array([np.nan])}, AdamState())
