"""Shared fixtures and the test-side finite-difference oracle.

The numeric differentiation here is intentionally written from scratch
(independent of hieratt.gradcheck) so package autodiff and package FD
machinery never validate each other in a circle.
"""

from __future__ import annotations

import numpy as np
import pytest

import hieratt.engine as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x, step=1e-5):
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    work = np.array(x, dtype=np.float64)
    grad = np.zeros_like(work)
    flat = work.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = f(work)
        flat[i] = keep - step
        fm = f(work)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst per-coordinate gap, relative to the larger magnitude.

    The floor keeps genuinely-zero gradients from dividing by zero.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def autodiff_vs_numeric(op, arrays, rng, step=1e-5):
    """Check d(sum(W*op(inputs)))/d(input_i) for every input, return worst gap.

    W is a fixed random weighting so every output coordinate matters.
    """
    tensors = [T.tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weight = rng.standard_normal(out.dims)
    T.backward(T.build_graph(out), T.tensor(weight))
    worst = 0.0
    for i, arr in enumerate(arrays):
        def scalar(x, _i=i):
            probe = [T.tensor(a) for a in arrays]
            probe[_i] = T.tensor(x)
            return float((op(*probe).data * weight).sum())

        assert tensors[i].grad is not None, f"input {i} received no gradient"
        worst = max(worst, max_rel_err(tensors[i].grad, numeric_grad(scalar, arr, step)))
    return worst
