"""Locally-enhanced feed-forward layer and its re-parameterized twin.

The plain form (LeFFN) is pw1 -> GELU -> depthwise k x k -> pw2. The
training form (Rep-LeFFN) widens each stage structurally: both pointwise
projections become sequential pairs, and the depthwise stage becomes a
parallel sum of 5x5, 3x3, 1x1 kernels plus an identity branch. Every
branch carries a bias; there is deliberately no normalization anywhere
in this layer.

Because all the extra structure is linear, it collapses exactly:
stacked pointwise convs multiply out to one matrix, parallel depthwise
kernels pad to a common 5x5 and sum, and the identity branch is a
centered delta kernel. fuse_rep_leffn applies both collapses and the
result computes the same function to rounding error while costing the
same as a plain LeFFN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import engine as T
from .engine import Tensor4
from .errors import ShapeError
from .params import ParamStore


def hidden_width(c: int, e: float) -> int:
    """Expanded channel count: floor(e * c), never below c."""
    return max(c, math.floor(e * c))


@dataclass
class LeffnParams:
    pw1_w: Tensor4
    pw1_b: Tensor4
    dw_w: Tensor4
    dw_b: Tensor4
    pw2_w: Tensor4
    pw2_b: Tensor4

    def __post_init__(self):
        m, c = self.pw1_w.dims[:2]
        if self.dw_w.dims[0] != m or self.dw_w.dims[1] != 1:
            raise ShapeError(f"dw_w must be ({m}, 1, k, k), got {self.dw_w.dims}")
        if self.pw2_w.dims[:2] != (c, m):
            raise ShapeError(f"pw2_w must be ({c}, {m}, 1, 1), got {self.pw2_w.dims}")

    @property
    def channels(self) -> int:
        return self.pw1_w.dims[1]

    @property
    def hidden(self) -> int:
        return self.pw1_w.dims[0]

    @property
    def k_dw(self) -> int:
        return self.dw_w.dims[2]


@dataclass
class RepLeffnParams:
    pw1a_w: Tensor4
    pw1a_b: Tensor4
    pw1b_w: Tensor4
    pw1b_b: Tensor4
    dw5_w: Tensor4
    dw5_b: Tensor4
    dw3_w: Tensor4
    dw3_b: Tensor4
    dw1_w: Tensor4
    dw1_b: Tensor4
    pw2a_w: Tensor4
    pw2a_b: Tensor4
    pw2b_w: Tensor4
    pw2b_b: Tensor4

    def __post_init__(self):
        m, c = self.pw1a_w.dims[:2]
        if self.pw1b_w.dims[:2] != (m, m):
            raise ShapeError(f"pw1b_w must be ({m}, {m}, 1, 1), got {self.pw1b_w.dims}")
        for name, k in (("dw5_w", 5), ("dw3_w", 3), ("dw1_w", 1)):
            got = getattr(self, name).dims
            if got != (m, 1, k, k):
                raise ShapeError(f"{name} must be ({m}, 1, {k}, {k}), got {got}")
        if self.pw2a_w.dims[:2] != (m, m):
            raise ShapeError(f"pw2a_w must be ({m}, {m}, 1, 1), got {self.pw2a_w.dims}")
        if self.pw2b_w.dims[:2] != (c, m):
            raise ShapeError(f"pw2b_w must be ({c}, {m}, 1, 1), got {self.pw2b_w.dims}")

    @property
    def channels(self) -> int:
        return self.pw1a_w.dims[1]

    @property
    def hidden(self) -> int:
        return self.pw1a_w.dims[0]


def _uniform(rng: np.random.Generator, dims, fan_in: int, dtype) -> Tensor4:
    bound = 1.0 / math.sqrt(fan_in)
    return T.tensor(rng.uniform(-bound, bound, size=dims).astype(dtype), requires_grad=True, dtype=dtype)


def init_leffn(rng: np.random.Generator, channels: int, expansion: float, k_dw: int = 5, dtype=T.F64) -> LeffnParams:
    c, m = channels, hidden_width(channels, expansion)
    return LeffnParams(
        pw1_w=_uniform(rng, (m, c, 1, 1), c, dtype),
        pw1_b=_uniform(rng, (1, m, 1, 1), c, dtype),
        dw_w=_uniform(rng, (m, 1, k_dw, k_dw), k_dw * k_dw, dtype),
        dw_b=_uniform(rng, (1, m, 1, 1), k_dw * k_dw, dtype),
        pw2_w=_uniform(rng, (c, m, 1, 1), m, dtype),
        pw2_b=_uniform(rng, (1, c, 1, 1), m, dtype),
    )


def init_rep_leffn(rng: np.random.Generator, channels: int, expansion: float, dtype=T.F64) -> RepLeffnParams:
    c, m = channels, hidden_width(channels, expansion)
    return RepLeffnParams(
        pw1a_w=_uniform(rng, (m, c, 1, 1), c, dtype),
        pw1a_b=_uniform(rng, (1, m, 1, 1), c, dtype),
        pw1b_w=_uniform(rng, (m, m, 1, 1), m, dtype),
        pw1b_b=_uniform(rng, (1, m, 1, 1), m, dtype),
        dw5_w=_uniform(rng, (m, 1, 5, 5), 25, dtype),
        dw5_b=_uniform(rng, (1, m, 1, 1), 25, dtype),
        dw3_w=_uniform(rng, (m, 1, 3, 3), 9, dtype),
        dw3_b=_uniform(rng, (1, m, 1, 1), 9, dtype),
        dw1_w=_uniform(rng, (m, 1, 1, 1), 1, dtype),
        dw1_b=_uniform(rng, (1, m, 1, 1), 1, dtype),
        pw2a_w=_uniform(rng, (m, m, 1, 1), m, dtype),
        pw2a_b=_uniform(rng, (1, m, 1, 1), m, dtype),
        pw2b_w=_uniform(rng, (c, m, 1, 1), m, dtype),
        pw2b_b=_uniform(rng, (1, c, 1, 1), m, dtype),
    )


def leffn_forward(x: Tensor4, params: LeffnParams) -> Tensor4:
    """pw2(dw(gelu(pw1(x)))); the GELU sits before the depthwise stage."""
    h = T.gelu(T.conv_pointwise(x, params.pw1_w, params.pw1_b))
    h = T.conv_depthwise(h, params.dw_w, params.dw_b)
    return T.conv_pointwise(h, params.pw2_w, params.pw2_b)


def rep_leffn_forward(x: Tensor4, params: RepLeffnParams) -> Tensor4:
    """Structurally widened form; computes the same family of functions.

    The identity branch belongs to the depthwise stage, so it feeds the
    post-GELU activations straight into the sum.
    """
    h = T.conv_pointwise(x, params.pw1a_w, params.pw1a_b)
    h = T.conv_pointwise(h, params.pw1b_w, params.pw1b_b)
    h = T.gelu(h)
    d = T.add(
        T.add(
            T.conv_depthwise(h, params.dw5_w, params.dw5_b),
            T.conv_depthwise(h, params.dw3_w, params.dw3_b),
        ),
        T.add(T.conv_depthwise(h, params.dw1_w, params.dw1_b), h),
    )
    d = T.conv_pointwise(d, params.pw2a_w, params.pw2a_b)
    return T.conv_pointwise(d, params.pw2b_w, params.pw2b_b)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def fuse_sequential_pw(w1: Tensor4, b1: Tensor4, w2: Tensor4, b2: Tensor4) -> tuple[Tensor4, Tensor4]:
    """Collapse pw2(pw1(x)) into one pointwise conv: w = w2 w1, b = w2 b1 + b2."""
    m, c = w1.dims[:2]
    o, m2 = w2.dims[:2]
    if m2 != m:
        raise ShapeError(f"inner dims differ: w1 is ({m}, {c}), w2 is ({o}, {m2})")
    a1 = w1.data.reshape(m, c)
    a2 = w2.data.reshape(o, m)
    w = (a2 @ a1).reshape(o, c, 1, 1)
    b = (a2 @ b1.data.reshape(m) + b2.data.reshape(o)).reshape(1, o, 1, 1)
    return T.tensor(w, dtype=w1.dtype), T.tensor(b, dtype=w1.dtype)


def fuse_parallel_dw(
    dw5: Tensor4,
    dw3: Tensor4,
    dw1: Tensor4,
    b5: Tensor4,
    b3: Tensor4,
    b1: Tensor4,
) -> tuple[Tensor4, Tensor4]:
    """Sum the parallel depthwise branches into one 5x5 kernel.

    Smaller kernels zero-pad to a centered 5x5; the implicit identity
    branch adds a centered unit delta per channel and no bias.
    """
    m = dw5.dims[0]
    if dw3.dims[0] != m or dw1.dims[0] != m:
        raise ShapeError(
            f"branch channel counts differ: {dw5.dims[0]}, {dw3.dims[0]}, {dw1.dims[0]}"
        )
    k = dw5.data.copy()
    k[:, :, 1:4, 1:4] += dw3.data
    k[:, :, 2:3, 2:3] += dw1.data
    k[:, 0, 2, 2] += 1.0
    b = b5.data + b3.data + b1.data
    return T.tensor(k, dtype=dw5.dtype), T.tensor(b, dtype=dw5.dtype)


def fuse_rep_leffn(params: RepLeffnParams) -> LeffnParams:
    """Exact inference form: same function, plain LeFFN structure, k_dw = 5."""
    pw1_w, pw1_b = fuse_sequential_pw(params.pw1a_w, params.pw1a_b, params.pw1b_w, params.pw1b_b)
    dw_w, dw_b = fuse_parallel_dw(
        params.dw5_w, params.dw3_w, params.dw1_w, params.dw5_b, params.dw3_b, params.dw1_b
    )
    pw2_w, pw2_b = fuse_sequential_pw(params.pw2a_w, params.pw2a_b, params.pw2b_w, params.pw2b_b)
    return LeffnParams(pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b)


# ---------------------------------------------------------------------------
# ParamStore naming: "<prefix>.rep.*" unfused, "<prefix>.leffn.*" fused
# ---------------------------------------------------------------------------

_SUFFIX = {"_w": ".weight", "_b": ".bias"}


def _names(cls, prefix: str, form: str) -> list[tuple[str, str]]:
    out = []
    for f in fields(cls):
        stem, tail = f.name[:-2], f.name[-2:]
        out.append((f.name, f"{prefix}.{form}.{stem}{_SUFFIX[tail]}"))
    return out


def store_ffn(store: ParamStore, prefix: str, params: LeffnParams | RepLeffnParams) -> None:
    form = "leffn" if isinstance(params, LeffnParams) else "rep"
    for field_name, store_name in _names(type(params), prefix, form):
        store.add(store_name, getattr(params, field_name))


def load_ffn(store: ParamStore, prefix: str) -> LeffnParams | RepLeffnParams:
    """Bind either form from a store; presence of .rep. names decides which."""
    cls = RepLeffnParams if f"{prefix}.rep.pw1a.weight" in store else LeffnParams
    form = "rep" if cls is RepLeffnParams else "leffn"
    return cls(**{f: store[n] for f, n in _names(cls, prefix, form)})
