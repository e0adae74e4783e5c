"""Gradient-check cases for composed layers.

Each case builds a small configuration of a real layer and exposes it as
(op, input arrays) for the finite-difference harness, with every
parameter tensor treated as a differentiable input. Kept separate from
gradcheck so the registry of primitive cases stays dependency-free.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .attention import FcsaParams, GgsaParams, fcsa_forward, ggsa_forward, init_fcsa, init_ggsa
from .ffn import RepLeffnParams, init_rep_leffn, rep_leffn_forward
from .gradcheck import GradCase
from .partition import (
    GridLayout,
    WindowLayout,
    grid_partition,
    grid_reverse,
    window_partition,
    window_reverse,
)


def _param_arrays(params, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for f in fields(params):
        base = getattr(params, f.name).data
        out.append(base + 0.05 * rng.standard_normal(base.shape))
    return out


def _fcsa_case(rng):
    layout = WindowLayout(4, 4, 2, shift=1)
    ref = init_fcsa(rng, channels=4, heads=2, window=2)
    names = [f.name for f in fields(FcsaParams)]

    def op(x, *tensors):
        return fcsa_forward(x, FcsaParams(**dict(zip(names, tensors))), layout)

    return op, [rng.standard_normal((1, 4, 4, 4)) * 0.5] + _param_arrays(ref, rng)


def _ggsa_case(rng):
    layout = GridLayout(4, 4, 2)
    ref = init_ggsa(rng, channels=4, heads=2, grid=2)
    names = [f.name for f in fields(GgsaParams)]

    def op(x, *tensors):
        return ggsa_forward(x, GgsaParams(**dict(zip(names, tensors))), layout)

    return op, [rng.standard_normal((1, 4, 4, 4)) * 0.5] + _param_arrays(ref, rng)


def _rep_leffn_case(rng):
    ref = init_rep_leffn(rng, channels=2, expansion=1.5)
    names = [f.name for f in fields(RepLeffnParams)]

    def op(x, *tensors):
        return rep_leffn_forward(x, RepLeffnParams(**dict(zip(names, tensors))))

    return op, [rng.standard_normal((1, 2, 3, 3)) * 0.5] + _param_arrays(ref, rng)


def _window_roundtrip_case(rng):
    layout = WindowLayout(4, 6, 2)

    def op(x):
        return window_reverse(window_partition(x, layout), layout, 2)

    return op, [rng.standard_normal((2, 3, 4, 6))]


def _grid_roundtrip_case(rng):
    layout = GridLayout(6, 4, 2)

    def op(x):
        return grid_reverse(grid_partition(x, layout), layout, 1)

    return op, [rng.standard_normal((1, 3, 6, 4))]


def cases() -> list[GradCase]:
    return [
        GradCase("fcsa_forward", _fcsa_case),
        GradCase("ggsa_forward", _ggsa_case),
        GradCase("rep_leffn_forward", _rep_leffn_case),
        GradCase("window_roundtrip", _window_roundtrip_case),
        GradCase("grid_roundtrip", _grid_roundtrip_case),
    ]
