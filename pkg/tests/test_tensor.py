"""Tensor engine: forward semantics against loop oracles, backward against
finite differences, and the purity/determinism guarantees."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hieratt.engine as T
from hieratt.errors import ConfigError, GraphError, NumericsError, ShapeError
from hieratt.gradcheck import primitive_cases

from conftest import autodiff_vs_numeric, max_rel_err, numeric_grad


# ---------------------------------------------------------------------------
# naive loop oracles, kept deliberately dumb
# ---------------------------------------------------------------------------


def naive_conv_pointwise(x, w, b):
    n, ci, h, wd = x.shape
    co = w.shape[0]
    out = np.zeros((n, co, h, wd))
    for ni in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for i in range(ci):
                        acc += w[o, i, 0, 0] * x[ni, i, y, xx]
                    out[ni, o, y, xx] = acc + (b[0, o, 0, 0] if b is not None else 0.0)
    return out


def naive_conv_depthwise(x, k, b):
    n, c, h, w = x.shape
    ks = k.shape[2]
    pad = ks // 2
    out = np.zeros_like(x)
    for ni in range(n):
        for ci in range(c):
            for y in range(h):
                for xx in range(w):
                    acc = 0.0
                    for i in range(ks):
                        for j in range(ks):
                            yy, xj = y + i - pad, xx + j - pad
                            if 0 <= yy < h and 0 <= xj < w:
                                acc += k[ci, 0, i, j] * x[ni, ci, yy, xj]
                    out[ni, ci, y, xx] = acc + (b[0, ci, 0, 0] if b is not None else 0.0)
    return out


def naive_conv2d(x, w, b):
    n, ci, h, wd = x.shape
    co, _, ks, _ = w.shape
    pad = ks // 2
    out = np.zeros((n, co, h, wd))
    for ni in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for i in range(ci):
                        for ky in range(ks):
                            for kx in range(ks):
                                yy, xj = y + ky - pad, xx + kx - pad
                                if 0 <= yy < h and 0 <= xj < wd:
                                    acc += w[o, i, ky, kx] * x[ni, i, yy, xj]
                    out[ni, o, y, xx] = acc + (b[0, o, 0, 0] if b is not None else 0.0)
    return out


def naive_matmul(a, b):
    m, k = a.shape
    k2, l = b.shape
    out = np.zeros((m, l))
    for i in range(m):
        for j in range(l):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


# ---------------------------------------------------------------------------
# construction and hygiene
# ---------------------------------------------------------------------------


class TestConstruction:
    def test_rank_enforced(self):
        with pytest.raises(ShapeError):
            T.tensor([1.0, 2.0])

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericsError):
            T.tensor([[[[np.inf]]]])

    def test_dtype_roundtrip(self):
        t = T.tensor([[[[1.0]]]], dtype=T.F32)
        assert t.dtype == np.float32

    def test_mixed_dtype_rejected(self):
        a = T.tensor([[[[1.0]]]], dtype=T.F32)
        b = T.tensor([[[[1.0]]]], dtype=T.F64)
        with pytest.raises(ConfigError):
            T.add(a, b)

    def test_ops_do_not_mutate_inputs(self, rng):
        x = T.tensor(rng.standard_normal((2, 3, 4, 4)))
        before = x.data.copy()
        T.gelu(x)
        T.softmax_lastdim(x)
        T.scale(x, 3.0)
        T.conv_depthwise(x, T.tensor(rng.standard_normal((3, 1, 3, 3))))
        np.testing.assert_array_equal(x.data, before)

    def test_same_inputs_bit_identical_outputs(self, rng):
        x = T.tensor(rng.standard_normal((2, 3, 4, 4)))
        a = T.gelu(x).data
        b = T.gelu(x).data
        np.testing.assert_array_equal(a, b)

    def test_debug_checks_flag_overflow(self):
        T.set_debug_checks(True)
        try:
            with np.errstate(over="ignore"), pytest.raises(NumericsError):
                T.exp(T.tensor([[[[1000.0]]]]))
        finally:
            T.set_debug_checks(False)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------


class TestConvPointwise:
    def test_identity_kernel(self):
        x = T.tensor(np.array([3.0, 5.0]).reshape(1, 2, 1, 1))
        w = T.tensor(np.eye(2).reshape(2, 2, 1, 1))
        out = T.conv_pointwise(x, w)
        np.testing.assert_allclose(out.data.reshape(-1), [3.0, 5.0])

    def test_hand_sum_with_bias(self):
        x = T.tensor(np.array([3.0, 5.0]).reshape(1, 2, 1, 1))
        w = T.tensor(np.array([[1.0, 1.0], [0.0, 0.0]]).reshape(2, 2, 1, 1))
        b = T.tensor(np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
        out = T.conv_pointwise(x, w, b)
        np.testing.assert_allclose(out.data.reshape(-1), [9.0, 0.0])

    def test_against_naive_loops(self, rng):
        x = rng.standard_normal((1, 8, 4, 4))
        w = rng.standard_normal((5, 8, 1, 1))
        b = rng.standard_normal((1, 5, 1, 1))
        out = T.conv_pointwise(T.tensor(x), T.tensor(w), T.tensor(b))
        assert np.max(np.abs(out.data - naive_conv_pointwise(x, w, b))) < 1e-12

    def test_channel_mismatch_names_both_shapes(self, rng):
        x = T.tensor(rng.standard_normal((1, 3, 2, 2)))
        w = T.tensor(rng.standard_normal((4, 5, 1, 1)))
        with pytest.raises(ShapeError, match=r"(?s)4, 5, 1, 1.*1, 3, 2, 2"):
            T.conv_pointwise(x, w)


class TestConvDepthwise:
    def test_k1_ones_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        k = np.ones((3, 1, 1, 1))
        out = T.conv_depthwise(T.tensor(x), T.tensor(k))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_overlap_counts(self):
        x = T.tensor(np.ones((1, 1, 3, 3)))
        k = T.tensor(np.ones((1, 1, 3, 3)))
        out = T.conv_depthwise(x, k).data[0, 0]
        expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
        np.testing.assert_array_equal(out, expected)

    def test_against_naive_loops_k5(self, rng):
        x = rng.standard_normal((1, 4, 5, 5))
        k = rng.standard_normal((4, 1, 5, 5))
        b = rng.standard_normal((1, 4, 1, 1))
        out = T.conv_depthwise(T.tensor(x), T.tensor(k), T.tensor(b))
        assert np.max(np.abs(out.data - naive_conv_depthwise(x, k, b))) < 1e-12

    def test_even_kernel_rejected(self, rng):
        x = T.tensor(rng.standard_normal((1, 2, 4, 4)))
        k = T.tensor(rng.standard_normal((2, 1, 4, 4)))
        with pytest.raises(ConfigError):
            T.conv_depthwise(x, k)


class TestConvDense:
    def test_against_naive_loops(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal((1, 4, 1, 1))
        out = T.conv2d_same(T.tensor(x), T.tensor(w), T.tensor(b))
        assert np.max(np.abs(out.data - naive_conv2d(x, w, b))) < 1e-12

    def test_k1_equals_pointwise(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        w = rng.standard_normal((2, 3, 1, 1))
        dense = T.conv2d_same(T.tensor(x), T.tensor(w)).data
        pw = T.conv_pointwise(T.tensor(x), T.tensor(w)).data
        np.testing.assert_array_equal(dense, pw)


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.tensor([[[[0.0]]]])).data.item() == 0.0

    def test_at_one_matches_normal_cdf(self):
        # Phi(1) = 0.8413447460685429, frozen from high-precision erf.
        out = T.gelu(T.tensor([[[[1.0]]]])).data.item()
        assert abs(out - 0.8413447460685429) < 1e-15

    def test_deep_negative_tail(self):
        out = T.gelu(T.tensor([[[[-10.0]]]])).data.item()
        assert -1e-20 < out < 0.0


class TestLayerNorm:
    def _params(self, c, scale=1.0, shift=0.0):
        return (
            T.tensor(np.full((1, c, 1, 1), scale)),
            T.tensor(np.full((1, c, 1, 1), shift)),
        )

    def test_constant_channels_zero(self):
        x = T.tensor(np.full((1, 4, 2, 2), 7.0))
        s, b = self._params(4)
        out = T.layer_norm_channels(x, s, b, eps=1e-6)
        assert np.max(np.abs(out.data)) < 1e-3  # eps bleeds in, stays near zero

    def test_two_channel_hand_case(self):
        x = T.tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
        s, b = self._params(2)
        out = T.layer_norm_channels(x, s, b, eps=1e-12)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-9)

    def test_statistics(self, rng):
        x = T.tensor(rng.standard_normal((2, 16, 5, 5)))
        s, b = self._params(16)
        out = T.layer_norm_channels(x, s, b, eps=1e-12).data
        mean = out.mean(axis=1)
        var = out.var(axis=1)
        assert np.max(np.abs(mean)) < 1e-10
        assert np.max(np.abs(var - 1.0)) < 1e-8

    def test_affine_applied(self, rng):
        x = T.tensor(rng.standard_normal((1, 3, 2, 2)))
        s = T.tensor(np.array([2.0, 3.0, 4.0]).reshape(1, 3, 1, 1))
        b = T.tensor(np.array([1.0, -1.0, 0.5]).reshape(1, 3, 1, 1))
        plain = T.layer_norm_channels(x, *self._params(3), eps=1e-6).data
        affine = T.layer_norm_channels(x, s, b, eps=1e-6).data
        np.testing.assert_allclose(affine, plain * s.data + b.data, atol=1e-12)

    def test_zero_eps_rejected(self, rng):
        x = T.tensor(rng.standard_normal((1, 1, 2, 2)))
        s, b = self._params(1)
        with pytest.raises(ConfigError):
            T.layer_norm_channels(x, s, b, eps=0.0)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax_lastdim(T.tensor(np.zeros((1, 1, 1, 2)))).data
        np.testing.assert_allclose(out.reshape(-1), [0.5, 0.5])

    def test_huge_logit_is_stable(self):
        out = T.softmax_lastdim(T.tensor(np.array([1000.0, 0.0]).reshape(1, 1, 1, 2))).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.reshape(-1), [1.0, 0.0], atol=1e-300)

    def test_log_weights(self):
        x = np.log(np.array([1.0, 2.0, 3.0])).reshape(1, 1, 1, 3)
        out = T.softmax_lastdim(T.tensor(x)).data.reshape(-1)
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rows_are_distributions(self, seed):
        x = np.random.default_rng(seed).normal(0.0, 5.0, size=(2, 2, 3, 6))
        out = T.softmax_lastdim(T.tensor(x)).data
        assert (out > 0.0).all() and (out <= 1.0).all()
        assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-12


class TestL2Normalize:
    def test_three_four_five(self):
        out = T.l2_normalize(T.tensor(np.array([3.0, 4.0]).reshape(1, 1, 1, 2))).data
        np.testing.assert_allclose(out.reshape(-1), [0.6, 0.8], atol=1e-10)

    def test_unit_vector_unchanged(self):
        x = np.array([1.0, 0.0, 0.0]).reshape(1, 1, 1, 3)
        out = T.l2_normalize(T.tensor(x)).data
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_random_norms(self, rng):
        x = rng.standard_normal((2, 3, 4, 8)) + 0.1
        out = T.l2_normalize(T.tensor(x)).data
        norms = np.sqrt((out * out).sum(axis=-1))
        assert np.max(np.abs(norms - 1.0)) < 1e-12

    def test_zero_slice_guarded(self):
        out = T.l2_normalize(T.tensor(np.zeros((1, 1, 1, 4)))).data
        assert np.isfinite(out).all()
        np.testing.assert_array_equal(out, np.zeros((1, 1, 1, 4)))


class TestPixelShuffling:
    def test_unshuffle_convention(self):
        x = T.tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.pixel_unshuffle(x, 2)
        assert out.dims == (1, 4, 1, 1)
        np.testing.assert_array_equal(out.data.reshape(-1), [1.0, 2.0, 3.0, 4.0])

    def test_shuffle_convention(self):
        x = T.tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = T.pixel_shuffle(x, 2)
        np.testing.assert_array_equal(out.data.reshape(2, 2), [[1.0, 2.0], [3.0, 4.0]])

    def test_roundtrip_bit_exact(self, rng):
        x = rng.standard_normal((2, 3, 6, 8))
        back = T.pixel_shuffle(T.pixel_unshuffle(T.tensor(x), 2), 2).data
        np.testing.assert_array_equal(back, x)

    def test_divisibility_errors(self, rng):
        with pytest.raises(ShapeError):
            T.pixel_unshuffle(T.tensor(rng.standard_normal((1, 1, 3, 4))), 2)
        with pytest.raises(ShapeError):
            T.pixel_shuffle(T.tensor(rng.standard_normal((1, 3, 2, 2))), 2)


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        eye = np.eye(3).reshape(1, 1, 3, 3)
        out = T.matmul_batched(T.tensor(eye), T.tensor(x)).data
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_row_times_column(self):
        a = T.tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
        b = T.tensor(np.array([3.0, 4.0]).reshape(1, 1, 2, 1))
        assert T.matmul_batched(a, b).data.item() == 11.0

    def test_against_triple_loop(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        out = T.matmul_batched(T.tensor(a.reshape(1, 1, 3, 4)), T.tensor(b.reshape(1, 1, 4, 5)))
        assert np.max(np.abs(out.data[0, 0] - naive_matmul(a, b))) < 1e-12

    def test_shape_errors(self, rng):
        a = T.tensor(rng.standard_normal((1, 2, 3, 4)))
        with pytest.raises(ShapeError):
            T.matmul_batched(a, T.tensor(rng.standard_normal((1, 2, 3, 4))))
        with pytest.raises(ShapeError):
            T.matmul_batched(a, T.tensor(rng.standard_normal((2, 1, 4, 3))))


class TestPadReflect:
    def test_reflects_without_border_repeat(self):
        x = T.tensor(np.arange(3.0).reshape(1, 1, 1, 3))  # [0, 1, 2]
        out = T.pad_reflect_br(x, 0, 2).data.reshape(-1)
        np.testing.assert_array_equal(out, [0.0, 1.0, 2.0, 1.0, 0.0])

    def test_length_one_axis_replicates(self):
        x = T.tensor(np.array([[5.0]]).reshape(1, 1, 1, 1))
        out = T.pad_reflect_br(x, 2, 3).data
        np.testing.assert_array_equal(out, np.full((1, 1, 3, 4), 5.0))

    def test_long_pad_zigzags(self):
        x = T.tensor(np.arange(2.0).reshape(1, 1, 1, 2))  # [0, 1]
        out = T.pad_reflect_br(x, 0, 4).data.reshape(-1)
        np.testing.assert_array_equal(out, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class TestBackward:
    def test_square_gradient(self):
        x = T.tensor([[[[3.0]]]], requires_grad=True)
        y = T.mul(x, x)
        T.backward(T.build_graph(y), T.tensor([[[[1.0]]]]))
        assert x.grad.item() == 6.0

    def test_fanout_accumulates(self):
        x = T.tensor([[[[2.0]]]], requires_grad=True)
        y = T.add(x, x)
        y.backward()
        assert x.grad.item() == 2.0

    def test_softmax_jacobian_row(self, rng):
        x = rng.standard_normal((1, 1, 1, 5))
        t = T.tensor(x, requires_grad=True)
        y = T.softmax_lastdim(t)
        seed = np.zeros((1, 1, 1, 5))
        seed[0, 0, 0, 2] = 1.0
        T.backward(T.build_graph(y), T.tensor(seed))
        p = np.exp(x - x.max())
        p = p / p.sum()
        expected = p[0, 0, 0, 2] * (np.eye(5)[2] - p.reshape(-1))
        np.testing.assert_allclose(t.grad.reshape(-1), expected, atol=1e-12)

    def test_consumed_graph_rejected(self):
        x = T.tensor([[[[1.0]]]], requires_grad=True)
        y = T.scale(x, 2.0)
        g = T.build_graph(y)
        T.backward(g, T.tensor([[[[1.0]]]]))
        with pytest.raises(GraphError):
            T.backward(g, T.tensor([[[[1.0]]]]))

    def test_seed_shape_mismatch(self):
        x = T.tensor([[[[1.0]]]], requires_grad=True)
        y = T.scale(x, 2.0)
        with pytest.raises(ShapeError):
            T.backward(T.build_graph(y), T.tensor(np.ones((1, 1, 1, 2))))

    def test_grad_accumulates_across_fresh_graphs(self):
        x = T.tensor([[[[1.0]]]], requires_grad=True)
        for _ in range(3):
            T.scale(x, 5.0).backward()
        assert x.grad.item() == 15.0

    def test_no_grad_suppresses_recording(self):
        x = T.tensor([[[[1.0]]]], requires_grad=True)
        with T.no_grad():
            y = T.scale(x, 2.0)
        assert y._vjp is None and not y.requires_grad

    def test_deep_chain_no_recursion_limit(self):
        x = T.tensor([[[[1.0]]]], requires_grad=True)
        y = x
        for _ in range(3000):
            y = T.scale(y, 1.0)
        y.backward()
        assert x.grad.item() == 1.0

    def test_every_primitive_against_finite_differences(self, rng):
        # Tensor-core invariant: 20 random draws per op, rel err < 1e-4.
        for case in primitive_cases():
            worst = 0.0
            for draw in range(20):
                sub = np.random.default_rng([draw, 77])
                op, arrays = case.build(sub)
                worst = max(worst, autodiff_vs_numeric(op, arrays, rng))
            assert worst < 1e-4, f"{case.name}: worst rel err {worst:.3e}"
