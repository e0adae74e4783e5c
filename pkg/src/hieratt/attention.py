"""The two attention mechanisms: FCSA and GGSA.

FCSA runs channel attention inside p x p windows: per head, the d
channel rows of a window are the attention tokens, compared by cosine
similarity over the window's pixels after a learned per-pixel weighting
of Q and K (never V). Two branches see different window placements, one
unshifted and one cyclically shifted, and a learned per-head spatial
weight map blends them. Temperature is learnable per head and kept
positive by storing its log.

GGSA runs spatial attention over a dilated g x g grid: grid partition
makes every group a g x g subsampling of the plane, so its g^2 tokens
cover the whole map at stride h/g, and a relative-position bias indexed
by token displacement is added to the logits. Temperature is the fixed
sqrt(d).

Both are pure functions of (input, params) and differentiable
throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine as T
from .engine import Tensor4, make_node
from .errors import ConfigError, ShapeError
from .partition import (
    GridLayout,
    WindowLayout,
    cyclic_shift,
    cyclic_unshift,
    grid_partition,
    grid_reverse,
    window_partition,
    window_reverse,
)


@dataclass
class FcsaParams:
    """Weights for one windowed channel-attention layer.

    Spatial maps (token_weight, merge_top, merge_bottom) are stored at
    the configured window size and cropped top-left when a feature map
    forces a smaller effective window. log_temperature may be (1, heads,
    1, 1) for a per-head temperature or (1, 1, 1, 1) for a shared one.
    """

    qkv_pw_w: Tensor4
    qkv_pw_b: Tensor4
    qkv_dw_w: Tensor4
    qkv_dw_b: Tensor4
    token_weight: Tensor4
    log_temperature: Tensor4
    merge_top: Tensor4
    merge_bottom: Tensor4
    out_pw_w: Tensor4
    out_pw_b: Tensor4

    def __post_init__(self):
        c3, c, kh, kw = self.qkv_pw_w.dims
        if c3 != 3 * c or (kh, kw) != (1, 1):
            raise ShapeError(f"qkv_pw_w must be (3c, c, 1, 1), got {self.qkv_pw_w.dims}")
        if self.qkv_dw_w.dims != (3 * c, 1, 3, 3):
            raise ShapeError(f"qkv_dw_w must be ({3 * c}, 1, 3, 3), got {self.qkv_dw_w.dims}")
        one, heads, p, p2 = self.token_weight.dims
        if one != 1 or p != p2:
            raise ShapeError(f"token_weight must be (1, heads, p, p), got {self.token_weight.dims}")
        if c % heads:
            raise ConfigError(f"heads={heads} does not divide channels={c}")
        if self.log_temperature.dims not in ((1, heads, 1, 1), (1, 1, 1, 1)):
            raise ShapeError(
                f"log_temperature must be (1, {heads}, 1, 1) or (1, 1, 1, 1), "
                f"got {self.log_temperature.dims}"
            )
        for name in ("merge_top", "merge_bottom"):
            if getattr(self, name).dims != self.token_weight.dims:
                raise ShapeError(f"{name} must match token_weight dims {self.token_weight.dims}")
        if self.out_pw_w.dims != (c, c, 1, 1):
            raise ShapeError(f"out_pw_w must be ({c}, {c}, 1, 1), got {self.out_pw_w.dims}")

    @property
    def channels(self) -> int:
        return self.qkv_pw_w.dims[1]

    @property
    def heads(self) -> int:
        return self.token_weight.dims[1]

    @property
    def window(self) -> int:
        return self.token_weight.dims[2]


@dataclass
class GgsaParams:
    """Weights for one dilated-grid spatial-attention layer.

    bias_table holds one value per head and per displacement between two
    tokens of the configured g x g grid; there are (2g-1)^2 distinct
    displacements.
    """

    qkv_pw_w: Tensor4
    qkv_pw_b: Tensor4
    bias_table: Tensor4
    out_pw_w: Tensor4
    out_pw_b: Tensor4

    def __post_init__(self):
        c3, c, kh, kw = self.qkv_pw_w.dims
        if c3 != 3 * c or (kh, kw) != (1, 1):
            raise ShapeError(f"qkv_pw_w must be (3c, c, 1, 1), got {self.qkv_pw_w.dims}")
        one, heads, one2, entries = self.bias_table.dims
        if one != 1 or one2 != 1:
            raise ShapeError(f"bias_table must be (1, heads, 1, (2g-1)^2), got {self.bias_table.dims}")
        side = math.isqrt(entries)
        if side * side != entries or side % 2 == 0:
            raise ShapeError(f"bias_table entry count {entries} is not an odd square")
        if c % heads:
            raise ConfigError(f"heads={heads} does not divide channels={c}")
        if self.out_pw_w.dims != (c, c, 1, 1):
            raise ShapeError(f"out_pw_w must be ({c}, {c}, 1, 1), got {self.out_pw_w.dims}")

    @property
    def channels(self) -> int:
        return self.qkv_pw_w.dims[1]

    @property
    def heads(self) -> int:
        return self.bias_table.dims[1]

    @property
    def grid(self) -> int:
        return (math.isqrt(self.bias_table.dims[3]) + 1) // 2

    @property
    def bias_index(self) -> np.ndarray:
        return _bias_index(self.grid, self.grid)


def _uniform(rng: np.random.Generator, dims, fan_in: int, dtype) -> Tensor4:
    bound = 1.0 / math.sqrt(fan_in)
    vals = rng.uniform(-bound, bound, size=dims).astype(dtype)
    return T.tensor(vals, requires_grad=True, dtype=dtype)


def _const(value: float, dims, dtype) -> Tensor4:
    return T.tensor(np.full(dims, value, dtype=dtype), requires_grad=True, dtype=dtype)


def init_fcsa(rng: np.random.Generator, channels: int, heads: int, window: int, dtype=T.F64) -> FcsaParams:
    """Fresh weights: uniform fan-in projections and neutral attention knobs.

    token_weight starts at 1 (no reweighting), both merge maps at 0.5
    (branch average), and log_temperature at 0 (temperature 1).
    """
    if channels % heads:
        raise ConfigError(f"heads={heads} does not divide channels={channels}")
    c = channels
    return FcsaParams(
        qkv_pw_w=_uniform(rng, (3 * c, c, 1, 1), c, dtype),
        qkv_pw_b=_uniform(rng, (1, 3 * c, 1, 1), c, dtype),
        qkv_dw_w=_uniform(rng, (3 * c, 1, 3, 3), 9, dtype),
        qkv_dw_b=_uniform(rng, (1, 3 * c, 1, 1), 9, dtype),
        token_weight=_const(1.0, (1, heads, window, window), dtype),
        log_temperature=_const(0.0, (1, heads, 1, 1), dtype),
        merge_top=_const(0.5, (1, heads, window, window), dtype),
        merge_bottom=_const(0.5, (1, heads, window, window), dtype),
        out_pw_w=_uniform(rng, (c, c, 1, 1), c, dtype),
        out_pw_b=_uniform(rng, (1, c, 1, 1), c, dtype),
    )


def init_ggsa(rng: np.random.Generator, channels: int, heads: int, grid: int, dtype=T.F64) -> GgsaParams:
    """Fresh weights: uniform fan-in projections, zero position bias."""
    if channels % heads:
        raise ConfigError(f"heads={heads} does not divide channels={channels}")
    c = channels
    return GgsaParams(
        qkv_pw_w=_uniform(rng, (3 * c, c, 1, 1), c, dtype),
        qkv_pw_b=_uniform(rng, (1, 3 * c, 1, 1), c, dtype),
        bias_table=_const(0.0, (1, heads, 1, (2 * grid - 1) ** 2), dtype),
        out_pw_w=_uniform(rng, (c, c, 1, 1), c, dtype),
        out_pw_b=_uniform(rng, (1, c, 1, 1), c, dtype),
    )


# ---------------------------------------------------------------------------
# FCSA
# ---------------------------------------------------------------------------


def fcsa_qkv(x: Tensor4, params: FcsaParams) -> tuple[Tensor4, Tensor4, Tensor4]:
    """Shared projection: pointwise to 3c, depthwise 3x3, split into Q, K, V."""
    c = params.channels
    if x.dims[1] != c:
        raise ShapeError(f"fcsa_qkv: input has {x.dims[1]} channels, params expect {c}")
    stacked = T.conv_pointwise(x, params.qkv_pw_w, params.qkv_pw_b)
    stacked = T.conv_depthwise(stacked, params.qkv_dw_w, params.qkv_dw_b)
    return (
        T.slice_channels(stacked, 0, c),
        T.slice_channels(stacked, c, 2 * c),
        T.slice_channels(stacked, 2 * c, 3 * c),
    )


def _crop_map(m: Tensor4, p: int) -> Tensor4:
    if m.dims[2] < p:
        raise ShapeError(f"stored {m.dims[2]}x{m.dims[3]} map cannot serve window {p}")
    if m.dims[2] == p:
        return m
    return T.crop_spatial(m, p, p)


def channel_attention_window(
    qw: Tensor4, kw: Tensor4, vw: Tensor4, token_weight: Tensor4, log_temperature: Tensor4
) -> Tensor4:
    """Per-head channel attention over a batch of p x p windows.

    Tokens are pixels; attention compares the d channel rows of each
    head. Q and K are reweighted per pixel by token_weight and L2
    normalized along the pixel axis, so logits are cosine similarities
    in [-1, 1] scaled by 1/temperature. V is used raw.
    """
    b, c, p, p2 = qw.dims
    if p != p2:
        raise ShapeError(f"windows must be square, got {qw.dims}")
    if kw.dims != qw.dims or vw.dims != qw.dims:
        raise ShapeError(f"Q/K/V window dims differ: {qw.dims}, {kw.dims}, {vw.dims}")
    heads = token_weight.dims[1]
    if c % heads:
        raise ShapeError(f"heads={heads} does not divide window channels={c}")
    d = c // heads
    wt = T.reshape(_crop_map(token_weight, p), (1, heads, 1, p * p))

    def tokens(t: Tensor4) -> Tensor4:
        return T.reshape(t, (b, heads, d, p * p))

    qhat = T.l2_normalize(T.mul(tokens(qw), wt))
    khat = T.l2_normalize(T.mul(tokens(kw), wt))
    inv_temp = T.exp(T.scale(log_temperature, -1.0))
    logits = T.mul(T.matmul_batched(qhat, T.transpose_last2(khat)), inv_temp)
    attn = T.softmax_lastdim(logits)
    out = T.matmul_batched(attn, tokens(vw))
    return T.reshape(out, (b, c, p, p))


def _spread_map(m: Tensor4, p: int, d: int, h: int, w: int) -> Tensor4:
    """Per-head p x p map -> full (1, c, h, w) map: tile over windows, repeat over d."""
    tiled = T.tile_spatial(_crop_map(m, p), h // p, w // p)
    return T.repeat_channels(tiled, d)


def fcsa_forward(x: Tensor4, params: FcsaParams, layout: WindowLayout) -> Tensor4:
    """Two-branch windowed channel attention with learned merge.

    The top branch partitions as-is; the bottom branch cyclically
    shifts by layout.shift first and unshifts after, so its windows
    straddle the top branch's window borders. No masking is applied;
    the merge maps learn how much of each placement to keep.
    """
    n, c, h, w = x.dims
    if c != params.channels:
        raise ShapeError(f"fcsa_forward: input has {c} channels, params expect {params.channels}")
    if (h, w) != (layout.h, layout.w):
        raise ShapeError(f"layout is for ({layout.h}, {layout.w}), input is ({h}, {w})")
    p, s = layout.window, layout.shift
    heads = params.heads
    d = c // heads

    q, k, v = fcsa_qkv(x, params)

    def branch(shift: int) -> Tensor4:
        if shift:
            qs, ks, vs = (cyclic_shift(t, shift) for t in (q, k, v))
        else:
            qs, ks, vs = q, k, v
        wins = channel_attention_window(
            window_partition(qs, layout),
            window_partition(ks, layout),
            window_partition(vs, layout),
            params.token_weight,
            params.log_temperature,
        )
        full = window_reverse(wins, layout, n)
        return cyclic_unshift(full, shift) if shift else full

    f_top = branch(0)
    f_bottom = branch(s)
    merged = T.add(
        T.mul(f_top, _spread_map(params.merge_top, p, d, h, w)),
        T.mul(f_bottom, _spread_map(params.merge_bottom, p, d, h, w)),
    )
    return T.conv_pointwise(merged, params.out_pw_w, params.out_pw_b)


# ---------------------------------------------------------------------------
# GGSA
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _bias_index(g: int, g_cfg: int) -> np.ndarray:
    """(g^2, g^2) table indices: entry (i, j) encodes token i minus token j.

    Indexing always uses the configured grid size, so a smaller
    effective grid reads the central slice of the same table.
    """
    ys, xs = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1)
    delta = coords[:, None, :] - coords[None, :, :]
    idx = (delta[..., 0] + g_cfg - 1) * (2 * g_cfg - 1) + (delta[..., 1] + g_cfg - 1)
    idx.setflags(write=False)
    return idx


def relative_position_bias(g: int, bias_table: Tensor4) -> Tensor4:
    """Gather the (1, heads, g^2, g^2) logit bias from the displacement table."""
    one, heads, one2, entries = bias_table.dims
    if one != 1 or one2 != 1:
        raise ShapeError(f"bias_table must be (1, heads, 1, entries), got {bias_table.dims}")
    side = math.isqrt(entries)
    if side * side != entries or side % 2 == 0:
        raise ShapeError(f"bias_table entry count {entries} is not an odd square")
    g_cfg = (side + 1) // 2
    if g > g_cfg:
        raise ShapeError(f"grid {g} exceeds table's configured grid {g_cfg}")
    idx = _bias_index(g, g_cfg)
    data = bias_table.data[:, :, 0, :][:, :, idx]

    def build():
        def vjp(grad):
            flat = grad.reshape(heads, -1).T
            acc = np.zeros((entries, heads), dtype=grad.dtype)
            np.add.at(acc, idx.ravel(), flat)
            return (acc.T.reshape(1, heads, 1, entries),)

        return vjp

    return make_node(data, "relative_position_bias", (bias_table,), build)


def ggsa_forward(x: Tensor4, params: GgsaParams, layout: GridLayout) -> Tensor4:
    """Spatial attention among the g^2 tokens of each dilated grid group."""
    n, c, h, w = x.dims
    if c != params.channels:
        raise ShapeError(f"ggsa_forward: input has {c} channels, params expect {params.channels}")
    if (h, w) != (layout.h, layout.w):
        raise ShapeError(f"layout is for ({layout.h}, {layout.w}), input is ({h}, {w})")
    g = layout.grid
    heads = params.heads
    d = c // heads

    stacked = T.conv_pointwise(x, params.qkv_pw_w, params.qkv_pw_b)
    q, k, v = (T.slice_channels(stacked, i * c, (i + 1) * c) for i in range(3))

    def tokens(t: Tensor4) -> Tensor4:
        groups = grid_partition(t, layout)
        return T.transpose_last2(T.reshape(groups, (groups.dims[0], heads, d, g * g)))

    qt, kt, vt = tokens(q), tokens(k), tokens(v)
    logits = T.scale(T.matmul_batched(qt, T.transpose_last2(kt)), 1.0 / math.sqrt(d))
    logits = T.add(logits, relative_position_bias(g, params.bias_table))
    out = T.matmul_batched(T.softmax_lastdim(logits), vt)
    out = T.reshape(T.transpose_last2(out), (out.dims[0], c, g, g))
    out = grid_reverse(out, layout, n)
    return T.conv_pointwise(out, params.out_pw_w, params.out_pw_b)
