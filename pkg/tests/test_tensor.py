"""Autodiff tensor primitives checked against brute-force oracles and finite differences."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmamba import tensor as T
from spmamba.errors import ConfigError, DimensionError, NumericalError, StateError, UsageError
from spmamba.gradcheck import grad_check
from spmamba.tensor import RunningStats, Tensor

from oracles import naive_conv, naive_maxpool


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = T.conv2d(Tensor(x), Tensor(w), pad=1)
        np.testing.assert_array_equal(y.data, x)

    def test_ones_kernel_on_ones_input(self):
        y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 9.0

    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 2, 4), (1, 1, 4)])
    def test_matches_naive_loops(self, stride, pad, groups):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 7, 6))
        w = rng.normal(size=(4, 4 // groups, 3, 3))
        b = rng.normal(size=4)
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad, groups=groups)
        np.testing.assert_allclose(y.data, naive_conv(x, w, b, stride, pad, groups), rtol=0, atol=1e-12)

    def test_random_oracle_shape_from_contract(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
        y = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1)
        assert y.shape == (2, 4, 4, 4)
        np.testing.assert_allclose(y.data, naive_conv(x, w, None, 2, 1), atol=1e-12)

    def test_per_channel_identity_is_identity_map(self):
        x = np.random.default_rng(3).normal(size=(2, 5, 4, 4))
        w = np.zeros((5, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        y = T.conv2d(Tensor(x), Tensor(w), pad=1, groups=5)
        np.testing.assert_array_equal(y.data, x)

    def test_indivisible_groups_is_config_error(self):
        with pytest.raises(ConfigError):
            T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), groups=2)

    def test_kernel_larger_than_input_is_dimension_error(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))

    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 2), (1, 1, 4), (2, 0, 4)])
    def test_gradients(self, stride, pad, groups):
        rng = np.random.default_rng(4)
        x = _leaf(rng.normal(size=(2, 4, 5, 5)))
        w = _leaf(rng.normal(size=(4, 4 // groups, 3, 3)))
        b = _leaf(rng.normal(size=4))
        proj = rng.normal(size=T.conv2d(x, w, b, stride, pad, groups).shape)
        rep = grad_check(lambda: (T.conv2d(x, w, b, stride, pad, groups) * proj).sum(), [x, w, b], tol=1e-6)
        assert rep.passed, str(rep)


class TestMaxPool:
    def test_identity_window(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 4, 4))
        np.testing.assert_array_equal(T.maxpool2d(Tensor(x), 1).data, x)

    def test_two_by_two_example(self):
        x = np.array([[[[1.0, 3.0], [2.0, 4.0]]]])
        assert T.maxpool2d(Tensor(x), 2, stride=2).item() == 4.0

    def test_sliding_window_oracle(self):
        x = np.random.default_rng(1).normal(size=(1, 1, 8, 8))
        y = T.maxpool2d(Tensor(x), 5, 1, 2)
        np.testing.assert_array_equal(y.data, naive_maxpool(x, 5, 1, 2))

    def test_strided_oracle(self):
        x = np.random.default_rng(2).normal(size=(2, 3, 7, 9))
        np.testing.assert_array_equal(T.maxpool2d(Tensor(x), 3, 2, 1).data, naive_maxpool(x, 3, 2, 1))

    def test_one_unit_of_gradient_per_window(self):
        x = _leaf(np.random.default_rng(3).normal(size=(1, 1, 6, 6)))
        T.maxpool2d(x, 3, 1, 1).sum().backward()
        assert x.grad.sum() == 36.0

    def test_ties_route_to_first_index(self):
        x = _leaf(np.ones((1, 1, 2, 2)))
        T.maxpool2d(x, 2, 2).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_gradients_away_from_ties(self):
        rng = np.random.default_rng(5)
        x = _leaf(rng.permutation(50).reshape(1, 2, 5, 5) * 0.1)  # distinct values, gaps >> h
        proj = rng.normal(size=(1, 2, 5, 5))
        assert grad_check(lambda: (T.maxpool2d(x, 3, 1, 1) * proj).sum(), x, tol=1e-6).passed


class TestPoolingAndLinear:
    def test_gap_constant(self):
        assert T.global_avg_pool(Tensor(np.full((1, 1, 3, 3), 2.5))).item() == 2.5

    def test_gap_mean(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert T.global_avg_pool(Tensor(x)).item() == 2.5

    def test_gap_double_sum_oracle(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 7))
        g = T.global_avg_pool(Tensor(x)).data
        for n in range(2):
            for c in range(3):
                ref = sum(x[n, c, i, j] for i in range(5) for j in range(7)) / 35
                assert abs(g[n, c, 0, 0] - ref) <= 1e-12

    def test_linear_identity_and_bias(self):
        x = np.random.default_rng(1).normal(size=(2, 3))
        np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
        b = np.array([1.0, -2.0])
        np.testing.assert_array_equal(T.linear(Tensor(np.zeros((4, 3))), Tensor(np.ones((2, 3))), Tensor(b)).data,
                                      np.tile(b, (4, 1)))

    def test_linear_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        x, w = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        ref = np.array([[sum(x[i, k] * w[j, k] for k in range(3)) for j in range(4)] for i in range(2)])
        np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w)).data, ref, atol=1e-12)

    def test_linear_mismatch(self):
        with pytest.raises(DimensionError):
            T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestBatchNorm:
    def _affine(self, c, gamma=1.0, beta=0.0):
        return Tensor(np.full(c, gamma)), Tensor(np.full(c, beta))

    def test_constant_channel_gives_beta(self):
        g, b = self._affine(2, 1.0, 5.0)
        y = T.batchnorm2d(Tensor(np.full((2, 2, 3, 3), 7.0)), g, b)
        np.testing.assert_array_equal(y.data, 5.0)

    def test_prestandardized_channel(self):
        x = np.random.default_rng(0).normal(size=(4, 1, 5, 5))
        x = (x - x.mean()) / x.std()
        g, b = self._affine(1)
        y = T.batchnorm2d(Tensor(x), g, b, eps=1e-5)
        np.testing.assert_allclose(y.data, x / math.sqrt(1 + 1e-5), atol=1e-12)

    def test_statistics_match_two_pass_oracle(self):
        x = np.random.default_rng(1).normal(2.0, 3.0, size=(3, 2, 4, 5))
        stats = RunningStats(np.zeros(2), np.ones(2), momentum=1.0)
        g, b = self._affine(2)
        T.batchnorm2d(Tensor(x), g, b, running_stats=stats)
        for c in range(2):
            vals = x[:, c].ravel()
            mu = sum(vals) / vals.size
            var = sum((v - mu) ** 2 for v in vals) / vals.size
            assert abs(stats.mean[c] - mu) <= 1e-12
            assert abs(stats.var[c] - var) <= 1e-12

    def test_running_stat_momentum(self):
        x = np.full((1, 1, 2, 2), 10.0)
        stats = RunningStats(np.zeros(1), np.ones(1), momentum=0.1)
        g, b = self._affine(1)
        T.batchnorm2d(Tensor(x), g, b, running_stats=stats)
        np.testing.assert_allclose(stats.mean, [1.0], atol=1e-15)
        np.testing.assert_allclose(stats.var, [0.9], atol=1e-15)

    def test_eval_without_stats_is_state_error(self):
        g, b = self._affine(1)
        with pytest.raises(StateError):
            T.batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), g, b, mode="eval")
        with pytest.raises(StateError):
            T.batchnorm2d(Tensor(np.ones((1, 1, 2, 2))), g, b, mode="eval",
                          running_stats=RunningStats(np.zeros(1), np.ones(1), initialized=False))

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(2)
        x = _leaf(rng.normal(size=(2, 3, 3, 4)))
        g, b = _leaf(rng.uniform(0.5, 1.5, 3)), _leaf(rng.normal(size=3))
        stats = RunningStats(rng.normal(size=3), rng.uniform(0.5, 2, 3))
        proj = rng.normal(size=x.shape)
        rep = grad_check(lambda: (T.batchnorm2d(x, g, b, mode=mode, running_stats=None if mode == "train" else stats)
                                  * proj).sum(), [x, g, b], tol=1e-6)
        assert rep.passed, str(rep)


class TestActivations:
    def test_scalar_values(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        assert T.silu(Tensor(0.0)).item() == 0.0
        assert T.relu(Tensor(-3.0)).item() == 0.0

    def test_softplus_asymptote(self):
        assert T.softplus(Tensor(50.0)).item() - 50.0 < 1e-20
        assert T.softplus(Tensor(-800.0)).item() == 0.0
        assert math.isfinite(T.softplus(Tensor(800.0)).item())

    def test_silu_one(self):
        assert abs(T.silu(Tensor(1.0)).item() - 1.0 / (1.0 + math.exp(-1.0))) <= 1e-15
        assert abs(T.silu(Tensor(1.0)).item() - 0.731059) < 5e-7

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            T.activation(Tensor(1.0), "tanh")

    @pytest.mark.parametrize("kind", ["sigmoid", "silu", "softplus", "relu"])
    def test_gradients(self, kind):
        rng = np.random.default_rng(3)
        v = rng.normal(size=20)
        v[np.abs(v) < 1e-3] += 0.01  # keep clear of the relu kink
        x = _leaf(v)
        w = rng.normal(size=20)
        assert grad_check(lambda: (T.activation(x, kind) * w).sum(), x, tol=1e-6).passed


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_allclose(T.softmax_axis(Tensor(np.zeros(5)), 0).data, 0.2, atol=1e-16)

    def test_shift_invariance(self):
        z = np.array([0.1, -1.0, 2.0])
        np.testing.assert_array_equal(T.softmax_axis(Tensor(z + 1024.0), 0).data,
                                      T.softmax_axis(Tensor(z + 1024.0 - 1024.0), 0).data)
        np.testing.assert_allclose(T.softmax_axis(Tensor(z + 3.0), 0).data, T.softmax_axis(Tensor(z), 0).data,
                                   atol=1e-16)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax_axis(Tensor([0.0, math.log(2.0)]), 0).data, [1 / 3, 2 / 3], atol=1e-15)

    def test_large_logits_are_finite(self):
        s = T.softmax_axis(Tensor([1000.0, 0.0]), 0).data
        np.testing.assert_allclose(s, [1.0, 0.0], atol=1e-300)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = _leaf(rng.normal(size=(3, 4)))
        w = rng.normal(size=(3, 4))
        assert grad_check(lambda: (T.softmax_axis(x, 1) * w).sum(), x, tol=1e-6).passed


class TestConcatSplit:
    def test_concat_single(self):
        x = Tensor(np.ones((1, 2, 2, 2)))
        np.testing.assert_array_equal(T.concat_channels([x]).data, x.data)

    def test_round_trip(self):
        x = np.random.default_rng(0).normal(size=(2, 8, 4, 4))
        parts = T.split_channels(Tensor(x), [3, 5])
        np.testing.assert_array_equal(T.concat_channels(parts).data, x)
        assert [p.shape[1] for p in parts] == [3, 5]

    def test_layout(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))
        y = T.concat_channels([Tensor(a), Tensor(b)]).data
        np.testing.assert_array_equal(y[:, 2], b[:, 0])

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_channels([Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 2)))])

    def test_bad_split_sizes(self):
        with pytest.raises(DimensionError):
            T.split_channels(Tensor(np.ones((1, 4, 2, 2))), [1, 2])

    @settings(max_examples=30, deadline=None)
    @given(sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 2 ** 16))
    def test_split_inverts_concat(self, sizes, seed):
        rng = np.random.default_rng(seed)
        xs = [rng.normal(size=(2, s, 3, 2)) for s in sizes]
        back = T.split_channels(T.concat_channels([Tensor(x) for x in xs]), sizes)
        for x, y in zip(xs, back):
            np.testing.assert_array_equal(y.data, x)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = _leaf(np.random.default_rng(0).normal(size=(3, 4)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_detached_constant_has_zero_gradient(self):
        x = _leaf(np.ones(3))
        c = (x * 2.0).detach()
        y = (c * 3.0).sum() + (x * 0.0).sum()
        y.backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_fan_out_accumulates(self):
        x = _leaf([2.0])
        (x * x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [5.0])

    def test_non_scalar_root(self):
        with pytest.raises(UsageError):
            T.backward(_leaf(np.ones(3)) * 2.0)

    def test_silu_linear_chain(self):
        rng = np.random.default_rng(1)
        x, w, b = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(4, 3))), _leaf(rng.normal(size=4))
        rep = grad_check(lambda: T.silu(T.linear(x, w, b)).sum(), [x, w, b], h=1e-5, tol=1e-6)
        assert rep.passed, str(rep)


class TestChecksAndErrors:
    def test_checked_mode_catches_non_finite(self):
        with pytest.raises(NumericalError), np.errstate(invalid="ignore"):
            T.log(Tensor([-1.0]))

    def test_unchecked_mode_lets_nan_through(self):
        with T.checked(False), np.errstate(invalid="ignore"):
            assert np.isnan(T.log(Tensor([-1.0])).item())

    def test_zero_extent_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 0)))

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(2)
        x, w = Tensor(rng.normal(size=(2, 4, 6, 6))), Tensor(rng.normal(size=(8, 4, 3, 3)))
        a = T.silu(T.conv2d(x, w, pad=1)).data
        b = T.silu(T.conv2d(x, w, pad=1)).data
        assert a.tobytes() == b.tobytes()


class TestSerialization:
    def test_round_trip(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4))
        buf = T.tensor_to_bytes(x)
        y, end = T.tensor_from_bytes(buf)
        np.testing.assert_array_equal(y, x)
        assert end == len(buf)

    def test_layout(self):
        buf = T.tensor_to_bytes(np.array([[1.5, -2.0]]))
        assert buf[:4] == b"SPMB"
        assert np.frombuffer(buf[4:12], "<u4").tolist() == [1, 2]
        assert np.frombuffer(buf[12:28], "<u8").tolist() == [1, 2]
        assert np.frombuffer(buf[28:], "<f8").tolist() == [1.5, -2.0]

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            T.tensor_from_bytes(b"XXXX" + bytes(20))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 20), shape=st.tuples(st.integers(1, 3), st.integers(1, 4)))
def test_elementwise_jvp_matches_finite_differences(seed, shape):
    rng = np.random.default_rng(seed)
    a = _leaf(rng.normal(size=shape))
    b = _leaf(rng.uniform(0.5, 2.0, size=shape[1:]))  # bias-style broadcast, kept away from 0 for div
    w = rng.normal(size=shape)
    rep = grad_check(lambda: ((a * b + a / b - T.exp(a * 0.3)) * w).sum(), [a, b], tol=1e-6)
    assert rep.passed, str(rep)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 20), axis=st.integers(0, 2))
def test_softmax_slices_sum_to_one(seed, axis):
    x = np.random.default_rng(seed).normal(scale=10.0, size=(3, 4, 5))
    s = T.softmax_axis(Tensor(x), axis).data
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)
    assert np.all(s >= 0)
