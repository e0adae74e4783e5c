"""Optimizer tests against an independently written scalar reference."""

import math

import numpy as np
import pytest

from hieratt.errors import ConfigError, ShapeError
from hieratt.optim import AdamWState, adamw_step, clip_grads, cosine_lr, global_grad_norm


def reference_adamw(x0, grad_fn, steps, lr, b1, b2, wd, eps):
    """Plain-Python AdamW on a list of scalars: the oracle trajectory."""
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            x[i] = x[i] * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)
    return x


class TestAdamW:
    def test_zero_grad_zero_wd_is_a_fixed_point(self):
        p = {"w": np.array([[[[1.5, -2.0]]]])}
        before = p["w"].copy()
        state = AdamWState()
        for _ in range(3):
            adamw_step(p, {"w": np.zeros_like(before)}, state, lr=0.1, weight_decay=0.0)
        assert np.array_equal(p["w"], before)

    def test_zero_grad_decay_shrinks_exactly(self):
        p = {"w": np.array([2.0, -4.0, 0.5])}
        before = p["w"].copy()
        state = AdamWState()
        adamw_step(p, {"w": np.zeros(3)}, state, lr=0.01, weight_decay=0.1)
        assert np.array_equal(p["w"], before * (1 - 0.01 * 0.1))
        adamw_step(p, {"w": np.zeros(3)}, state, lr=0.01, weight_decay=0.1)
        assert np.array_equal(p["w"], before * (1 - 0.01 * 0.1) ** 2)

    def test_first_step_closed_form(self):
        g = np.array([0.3, -2.0, 1e-12])
        p = {"w": np.zeros(3)}
        lr, eps = 1e-3, 1e-8
        adamw_step(p, {"w": g.copy()}, AdamWState(), lr=lr, weight_decay=0.0, eps=eps)
        # bias correction cancels at t=1: update is -lr * g / (|g| + eps)
        expected = -lr * g / (np.abs(g) + eps)
        assert np.allclose(p["w"], expected, rtol=0, atol=1e-18)
        # which is within eps-noise of -lr * sign(g) for healthy magnitudes
        assert p["w"][0] == pytest.approx(-lr, rel=1e-6)
        assert p["w"][1] == pytest.approx(lr, rel=1e-6)

    def test_trajectory_matches_reference_on_quadratic(self):
        # f(x) = 0.5 (x - a)^T D (x - a), grad = D (x - a)
        a = [1.0, -3.0]
        d = [2.0, 0.5]
        lr, b1, b2, wd, eps = 3e-2, 0.9, 0.999, 1e-2, 1e-8

        want = reference_adamw(
            [0.0, 0.0],
            lambda x: [d[i] * (x[i] - a[i]) for i in range(2)],
            steps=100, lr=lr, b1=b1, b2=b2, wd=wd, eps=eps,
        )

        p = {"x": np.zeros(2)}
        state = AdamWState()
        for _ in range(100):
            g = {"x": np.array(d) * (p["x"] - np.array(a))}
            adamw_step(p, g, state, lr=lr, betas=(b1, b2), weight_decay=wd, eps=eps)
        assert np.max(np.abs(p["x"] - np.array(want))) < 1e-12
        # sanity: it actually approached the minimum
        assert np.all(np.abs(p["x"] - np.array(a)) < np.abs(np.array(a)))

    def test_state_counts_steps_and_keeps_moments_per_name(self):
        p = {"a": np.ones(2), "b": np.ones(3)}
        state = AdamWState()
        adamw_step(p, {"a": np.ones(2), "b": np.ones(3)}, state, lr=1e-3)
        assert state.step == 1
        assert set(state.m) == {"a", "b"}
        assert state.m["a"].shape == (2,)
        assert state.v["b"].shape == (3,)

    def test_moments_inherit_parameter_dtype(self):
        p = {"w": np.ones(4, dtype=np.float32)}
        state = AdamWState()
        adamw_step(p, {"w": np.ones(4, dtype=np.float32)}, state, lr=1e-3)
        assert p["w"].dtype == np.float32
        assert state.m["w"].dtype == np.float32
        assert state.v["w"].dtype == np.float32

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="shape"):
            adamw_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamWState(), lr=1e-3)

    def test_missing_grad_rejected(self):
        with pytest.raises(ConfigError, match="missing gradient"):
            adamw_step({"w": np.ones(2)}, {}, AdamWState(), lr=1e-3)

    def test_updates_are_in_place(self):
        arr = np.ones(2)
        p = {"w": arr}
        adamw_step(p, {"w": np.ones(2)}, AdamWState(), lr=1e-3)
        assert p["w"] is arr  # training loops rely on store aliasing


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 3e-4, 1e-6) == pytest.approx(3e-4)
        assert cosine_lr(100, 100, 3e-4, 1e-6) == pytest.approx(1e-6)
        assert cosine_lr(50, 100, 3e-4, 1e-6) == pytest.approx((3e-4 + 1e-6) / 2)

    def test_monotone_decreasing(self):
        values = [cosine_lr(i, 200, 1e-3, 1e-6) for i in range(201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_bounds_enforced(self):
        with pytest.raises(ConfigError):
            cosine_lr(-1, 10, 1e-3, 1e-6)
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 1e-3, 1e-6)
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 1e-3, 1e-6)


class TestClipGrads:
    def test_large_gradients_scaled_to_max_norm(self):
        g = {"a": np.array([3.0, 4.0])}  # norm 5
        norm = clip_grads(g, max_norm=1.0)
        assert norm == pytest.approx(5.0)
        assert global_grad_norm(g) == pytest.approx(1.0)
        assert np.allclose(g["a"], [0.6, 0.8])

    def test_small_gradients_untouched(self):
        g = {"a": np.array([0.3, 0.4])}
        before = g["a"].copy()
        norm = clip_grads(g, max_norm=1.0)
        assert norm == pytest.approx(0.5)
        assert np.array_equal(g["a"], before)

    def test_norm_spans_all_entries(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert global_grad_norm(g) == pytest.approx(5.0)
