"""Rank-4 tensor engine with reverse-mode differentiation.

Every value in the package is a Tensor4: a dense rank-4 array in
(n, c, h, w) order, row-major, float64 by default with float32 offered
for speed. Operations are pure functions that allocate fresh outputs;
no primitive ever mutates an input. When an input participates in
gradient tracking, the op attaches a vector-Jacobian closure to the
result, which is enough to replay the chain rule later without any
global tape: `build_graph` linearizes the dynamic graph reachable from
an output, and `backward` walks it once in reverse.

Conventions fixed here and relied on everywhere else:

- layer normalization reduces over the channel axis, per (n, y, x) site
- softmax and L2 normalization act on the trailing axis
- pixel_unshuffle(r) maps input channel c and block offset (dy, dx) to
  output channel c * r**2 + dy * r + dx; pixel_shuffle is its inverse
- convolutions use "same" zero padding and stride 1

Reductions use numpy's deterministic pairwise summation, so repeated
runs on identical inputs are bit-identical.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

from .errors import ConfigError, GraphError, NumericsError, ShapeError

F64 = np.float64
F32 = np.float32
_DTYPES = (F64, F32)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_debug_checks = False
_grad_enabled = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness validation (off by default, it is slow)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording inside the block. Used on inference paths."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor4:
    """Immutable rank-4 array plus optional gradient bookkeeping.

    `grad` is only populated on requires_grad leaves, by `backward`.
    Interior nodes keep their upstream gradient transiently during the
    backward sweep and never store it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tag", "_inputs", "_vjp")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.ndim != 4:
            raise ShapeError(f"Tensor4 needs rank 4, got shape {data.shape}")
        if data.dtype not in _DTYPES:
            raise ConfigError(f"unsupported dtype {data.dtype}, use float64 or float32")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tag: str = "leaf"
        self._inputs: tuple[Tensor4, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def detach(self) -> "Tensor4":
        return Tensor4(self.data, requires_grad=False)

    def backward(self, seed: "Tensor4 | None" = None) -> None:
        backward(build_graph(self), seed if seed is not None else ones_like(self))

    def __repr__(self) -> str:
        return f"Tensor4(dims={self.dims}, dtype={self.data.dtype.name}, tag={self._tag})"

    # Operator sugar; the named functions are the real API.
    def __add__(self, other: "Tensor4") -> "Tensor4":
        return add(self, other)

    def __sub__(self, other: "Tensor4") -> "Tensor4":
        return sub(self, other)

    def __mul__(self, other: "Tensor4") -> "Tensor4":
        return mul(self, other)


def tensor(values, requires_grad: bool = False, dtype=F64) -> Tensor4:
    """Build a Tensor4 from array-like input, validating finiteness."""
    data = np.asarray(values, dtype=dtype)
    if data.ndim != 4:
        raise ShapeError(f"expected rank-4 input, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise NumericsError("non-finite values in tensor input")
    return Tensor4(data.copy(), requires_grad=requires_grad)


def zeros(dims: Sequence[int], dtype=F64, requires_grad: bool = False) -> Tensor4:
    return Tensor4(np.zeros(tuple(dims), dtype=dtype), requires_grad=requires_grad)


def ones_like(t: Tensor4) -> Tensor4:
    return Tensor4(np.ones(t.dims, dtype=t.dtype))


def make_node(
    data: np.ndarray,
    tag: str,
    inputs: tuple[Tensor4, ...],
    vjp_builder: Callable[[], Callable[[np.ndarray], tuple]],
) -> Tensor4:
    """Wrap an op result, recording the vjp only when gradients are live.

    `vjp_builder` is called lazily so pure-inference forwards pay nothing
    for closures. This is the extension point composite modules use to
    register their own differentiable index operations.
    """
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {tag}")
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor4(data, requires_grad=needs)
    if needs:
        out._tag = tag
        out._inputs = inputs
        out._vjp = vjp_builder()
    return out


def _check_same_dtype(tag: str, *tensors: Tensor4) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ConfigError(f"{tag}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes the forward broadcast, back to `shape`."""
    for axis in range(4):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcastable(a: tuple, b: tuple) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dtype("add", a, b)
    if not _broadcastable(a.dims, b.dims):
        raise ShapeError(f"add: cannot broadcast {a.dims} with {b.dims}")
    data = a.data + b.data

    def build():
        def vjp(g):
            ga = _unbroadcast(g, a.dims) if a.requires_grad else None
            gb = _unbroadcast(g, b.dims) if b.requires_grad else None
            return ga, gb

        return vjp

    return make_node(data, "add", (a, b), build)


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dtype("sub", a, b)
    if not _broadcastable(a.dims, b.dims):
        raise ShapeError(f"sub: cannot broadcast {a.dims} with {b.dims}")
    data = a.data - b.data

    def build():
        def vjp(g):
            ga = _unbroadcast(g, a.dims) if a.requires_grad else None
            gb = _unbroadcast(-g, b.dims) if b.requires_grad else None
            return ga, gb

        return vjp

    return make_node(data, "sub", (a, b), build)


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dtype("mul", a, b)
    if not _broadcastable(a.dims, b.dims):
        raise ShapeError(f"mul: cannot broadcast {a.dims} with {b.dims}")
    data = a.data * b.data

    def build():
        def vjp(g):
            ga = _unbroadcast(g * b.data, a.dims) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.dims) if b.requires_grad else None
            return ga, gb

        return vjp

    return make_node(data, "mul", (a, b), build)


def scale(a: Tensor4, s: float) -> Tensor4:
    s = float(s)
    data = a.data * s

    def build():
        return lambda g: (g * s,)

    return make_node(data, "scale", (a,), build)


def exp(a: Tensor4) -> Tensor4:
    data = np.exp(a.data)

    def build():
        return lambda g: (g * data,)

    return make_node(data, "exp", (a,), build)


def absolute(a: Tensor4) -> Tensor4:
    """Elementwise |x|. Subgradient sign(x) at zero, as usual for L1 losses."""
    data = np.abs(a.data)

    def build():
        return lambda g: (g * np.sign(a.data),)

    return make_node(data, "abs", (a,), build)


def sum_all(a: Tensor4) -> Tensor4:
    data = a.data.sum().reshape(1, 1, 1, 1)

    def build():
        return lambda g: (np.broadcast_to(g, a.dims).astype(a.dtype, copy=True),)

    return make_node(data, "sum_all", (a,), build)


def mean_all(a: Tensor4) -> Tensor4:
    inv = 1.0 / a.data.size
    data = (a.data.sum() * inv).reshape(1, 1, 1, 1)

    def build():
        return lambda g: ((np.broadcast_to(g, a.dims) * inv).astype(a.dtype, copy=False),)

    return make_node(data, "mean_all", (a,), build)


def gelu(a: Tensor4) -> Tensor4:
    """Exact Gaussian error linear unit, x * Phi(x), no tanh shortcut.

    Phi goes through erfc so the far negative tail keeps its tiny
    nonzero value instead of cancelling to zero.
    """
    x = a.data
    cdf = 0.5 * erfc(-x * _INV_SQRT2)
    data = x * cdf

    def build():
        def vjp(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            return (g * (cdf + x * pdf),)

        return vjp

    return make_node(data, "gelu", (a,), build)


def softmax_lastdim(a: Tensor4) -> Tensor4:
    """Rows over the trailing axis map to the probability simplex.

    Stabilized by max subtraction, so huge logits do not overflow.
    """
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def build():
        def vjp(g):
            dot = (g * data).sum(axis=-1, keepdims=True)
            return (data * (g - dot),)

        return vjp

    return make_node(data, "softmax", (a,), build)


def l2_normalize(a: Tensor4, axis: int = -1, eps: float = 1e-12) -> Tensor4:
    """Scale each slice along `axis` to unit L2 norm.

    An all-zero slice stays zero: the norm is guarded by eps instead of
    dividing by zero, so no NaN can escape.
    """
    if eps <= 0.0:
        raise ConfigError(f"l2_normalize eps must be > 0, got {eps}")
    if not -4 <= axis < 4:
        raise ShapeError(f"l2_normalize: axis {axis} out of range for rank 4")
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    inv = 1.0 / (norm + eps)
    data = x * inv

    def build():
        def vjp(g):
            dot = (g * x).sum(axis=axis, keepdims=True)
            safe = np.maximum(norm, eps)
            return (g * inv - x * (dot * inv * inv / safe),)

        return vjp

    return make_node(data, "l2_normalize", (a,), build)


def layer_norm_channels(x: Tensor4, ln_scale: Tensor4, ln_shift: Tensor4, eps: float = 1e-6) -> Tensor4:
    """Normalize each (n, y, x) site over its channel vector, then affine.

    `ln_scale` and `ln_shift` are per-channel parameters stored as
    (1, c, 1, 1) tensors. Variance is the biased estimate.
    """
    if eps <= 0.0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    c = x.dims[1]
    for name, p in (("scale", ln_scale), ("shift", ln_shift)):
        if p.dims != (1, c, 1, 1):
            raise ShapeError(f"layer_norm {name}: expected (1, {c}, 1, 1), got {p.dims}")
    _check_same_dtype("layer_norm", x, ln_scale, ln_shift)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * ln_scale.data + ln_shift.data

    def build():
        def vjp(g):
            gx = None
            if x.requires_grad:
                gh = g * ln_scale.data
                gh_mean = gh.mean(axis=1, keepdims=True)
                ghx_mean = (gh * xhat).mean(axis=1, keepdims=True)
                gx = inv * (gh - gh_mean - xhat * ghx_mean)
            gs = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) if ln_scale.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) if ln_shift.requires_grad else None
            return gx, gs, gb

        return vjp

    return make_node(data, "layer_norm", (x, ln_scale, ln_shift), build)


# ---------------------------------------------------------------------------
# shape movement
# ---------------------------------------------------------------------------


def reshape(a: Tensor4, dims: Sequence[int]) -> Tensor4:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ShapeError(f"reshape target must be rank 4, got {dims}")
    if math.prod(dims) != a.data.size:
        raise ShapeError(f"reshape: {a.dims} has {a.data.size} elements, target {dims}")
    data = a.data.reshape(dims)

    def build():
        return lambda g: (g.reshape(a.dims),)

    return make_node(data, "reshape", (a,), build)


def transpose_last2(a: Tensor4) -> Tensor4:
    data = np.ascontiguousarray(a.data.swapaxes(-1, -2))

    def build():
        return lambda g: (g.swapaxes(-1, -2),)

    return make_node(data, "transpose_last2", (a,), build)


def concat_channels(parts: Sequence[Tensor4]) -> Tensor4:
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    _check_same_dtype("concat_channels", *parts)
    base = parts[0].dims
    for p in parts[1:]:
        if (p.dims[0], p.dims[2], p.dims[3]) != (base[0], base[2], base[3]):
            raise ShapeError(f"concat_channels: incompatible dims {base} vs {p.dims}")
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.dims[1] for p in parts]

    def build():
        def vjp(g):
            grads, start = [], 0
            for p, sz in zip(parts, sizes):
                grads.append(g[:, start : start + sz] if p.requires_grad else None)
                start += sz
            return tuple(grads)

        return vjp

    return make_node(data, "concat_channels", tuple(parts), build)


def slice_channels(a: Tensor4, start: int, stop: int) -> Tensor4:
    if not (0 <= start < stop <= a.dims[1]):
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for c={a.dims[1]}")
    data = a.data[:, start:stop]

    def build():
        def vjp(g):
            out = np.zeros(a.dims, dtype=g.dtype)
            out[:, start:stop] = g
            return (out,)

        return vjp

    return make_node(data, "slice_channels", (a,), build)


def repeat_channels(a: Tensor4, r: int) -> Tensor4:
    """Repeat each channel r times consecutively (channel-major order)."""
    if r < 1:
        raise ConfigError(f"repeat_channels: r must be >= 1, got {r}")
    n, c, h, w = a.dims
    data = np.repeat(a.data, r, axis=1)

    def build():
        return lambda g: (g.reshape(n, c, r, h, w).sum(axis=2),)

    return make_node(data, "repeat_channels", (a,), build)


def tile_spatial(a: Tensor4, ny: int, nx: int) -> Tensor4:
    if ny < 1 or nx < 1:
        raise ConfigError(f"tile_spatial: counts must be >= 1, got ({ny}, {nx})")
    n, c, h, w = a.dims
    data = np.tile(a.data, (1, 1, ny, nx))

    def build():
        return lambda g: (g.reshape(n, c, ny, h, nx, w).sum(axis=(2, 4)),)

    return make_node(data, "tile_spatial", (a,), build)


def crop_spatial(a: Tensor4, h: int, w: int) -> Tensor4:
    """Keep the top-left h x w region."""
    if not (1 <= h <= a.dims[2] and 1 <= w <= a.dims[3]):
        raise ShapeError(f"crop_spatial: target ({h}, {w}) exceeds {a.dims}")
    data = a.data[:, :, :h, :w]

    def build():
        def vjp(g):
            out = np.zeros(a.dims, dtype=g.dtype)
            out[:, :, :h, :w] = g
            return (out,)

        return vjp

    return make_node(data, "crop_spatial", (a,), build)


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Source indices for extending length n by pad on the high side.

    Mirror reflection without repeating the border sample; a length-1
    axis falls back to border replication since it has nothing to mirror.
    """
    if n == 1:
        return np.zeros(pad, dtype=np.intp)
    period = 2 * (n - 1)
    j = np.arange(n, n + pad) % period
    return np.where(j < n, j, period - j).astype(np.intp)


def pad_reflect_br(a: Tensor4, ph: int, pw: int) -> Tensor4:
    """Reflect-pad the bottom and right edges by (ph, pw)."""
    if ph < 0 or pw < 0:
        raise ConfigError(f"pad_reflect_br: negative padding ({ph}, {pw})")
    n, c, h, w = a.dims
    ymap = np.concatenate([np.arange(h, dtype=np.intp), _reflect_indices(h, ph)])
    xmap = np.concatenate([np.arange(w, dtype=np.intp), _reflect_indices(w, pw)])
    data = np.ascontiguousarray(a.data[:, :, ymap][:, :, :, xmap])

    def build():
        def vjp(g):
            gy = np.zeros((n, c, h, w + pw), dtype=g.dtype)
            np.add.at(gy, (slice(None), slice(None), ymap), g)
            gx = np.zeros((n, c, h, w), dtype=g.dtype)
            np.add.at(gx, (slice(None), slice(None), slice(None), xmap), gy)
            return (gx,)

        return vjp

    return make_node(data, "pad_reflect_br", (a,), build)


# ---------------------------------------------------------------------------
# matrix products and convolutions
# ---------------------------------------------------------------------------


def matmul_batched(a: Tensor4, b: Tensor4) -> Tensor4:
    """(B1, B2, M, K) @ (B1, B2, K, L). Batch dims must match exactly."""
    _check_same_dtype("matmul_batched", a, b)
    if a.dims[:2] != b.dims[:2]:
        raise ShapeError(f"matmul_batched: batch dims differ, {a.dims} vs {b.dims}")
    if a.dims[3] != b.dims[2]:
        raise ShapeError(f"matmul_batched: inner dims differ, {a.dims} vs {b.dims}")
    data = np.matmul(a.data, b.data)

    def build():
        def vjp(g):
            ga = np.matmul(g, b.data.swapaxes(-1, -2)) if a.requires_grad else None
            gb = np.matmul(a.data.swapaxes(-1, -2), g) if b.requires_grad else None
            return ga, gb

        return vjp

    return make_node(data, "matmul_batched", (a, b), build)


def _check_bias(tag: str, bias: Tensor4 | None, c_out: int) -> None:
    if bias is not None and bias.dims != (1, c_out, 1, 1):
        raise ShapeError(f"{tag}: bias must be (1, {c_out}, 1, 1), got {bias.dims}")


def conv_pointwise(x: Tensor4, weight: Tensor4, bias: Tensor4 | None = None) -> Tensor4:
    """1x1 convolution: a per-pixel linear map over channels.

    weight dims are (c_out, c_in, 1, 1).
    """
    n, ci, h, w = x.dims
    co, wi, kh, kw = weight.dims
    if (kh, kw) != (1, 1) or wi != ci:
        raise ShapeError(f"conv_pointwise: weight {weight.dims} does not match input {x.dims}")
    _check_bias("conv_pointwise", bias, co)
    _check_same_dtype("conv_pointwise", *(t for t in (x, weight, bias) if t is not None))
    w2 = weight.data.reshape(co, ci)
    data = np.matmul(w2, x.data.reshape(n, ci, h * w)).reshape(n, co, h, w)
    if bias is not None:
        data += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def build():
        def vjp(g):
            g3 = g.reshape(n, co, h * w)
            gx = gw = gb = None
            if x.requires_grad:
                gx = np.matmul(w2.T, g3).reshape(n, ci, h, w)
            if weight.requires_grad:
                gw = np.matmul(g3, x.data.reshape(n, ci, h * w).swapaxes(-1, -2)).sum(axis=0)
                gw = gw.reshape(co, ci, 1, 1)
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
            return (gx, gw) if bias is None else (gx, gw, gb)

        return vjp

    return make_node(data, "conv_pointwise", inputs, build)


def conv_depthwise(x: Tensor4, kernel: Tensor4, bias: Tensor4 | None = None) -> Tensor4:
    """Per-channel k x k convolution, same zero padding, stride 1.

    kernel dims are (c, 1, k, k); k must be odd so the padding centers.
    """
    n, c, h, w = x.dims
    kc, one, kh, kw = kernel.dims
    if kc != c or one != 1 or kh != kw:
        raise ShapeError(f"conv_depthwise: kernel {kernel.dims} does not match input {x.dims}")
    k = kh
    if k % 2 == 0:
        raise ConfigError(f"conv_depthwise: kernel size must be odd, got {k}")
    _check_bias("conv_depthwise", bias, c)
    _check_same_dtype("conv_depthwise", *(t for t in (x, kernel, bias) if t is not None))
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    data = np.zeros((n, c, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            data += xp[:, :, i : i + h, j : j + w] * kernel.data[:, 0, i, j][None, :, None, None]
    if bias is not None:
        data += bias.data
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def build():
        def vjp(g):
            gx = gk = gb = None
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + h, j : j + w] += g * kernel.data[:, 0, i, j][None, :, None, None]
                gx = gxp[:, :, pad : pad + h, pad : pad + w]
            if kernel.requires_grad:
                gk = np.empty((c, 1, k, k), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gk[:, 0, i, j] = (g * xp[:, :, i : i + h, j : j + w]).sum(axis=(0, 2, 3))
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            return (gx, gk) if bias is None else (gx, gk, gb)

        return vjp

    return make_node(data, "conv_depthwise", inputs, build)


def conv2d_same(x: Tensor4, weight: Tensor4, bias: Tensor4 | None = None) -> Tensor4:
    """Dense k x k convolution, same zero padding, stride 1.

    weight dims are (c_out, c_in, k, k) with odd k. Used for the few
    full convolutions in the model; attention layers stay pointwise
    plus depthwise.
    """
    n, ci, h, w = x.dims
    co, wi, kh, kw = weight.dims
    if wi != ci or kh != kw:
        raise ShapeError(f"conv2d_same: weight {weight.dims} does not match input {x.dims}")
    k = kh
    if k % 2 == 0:
        raise ConfigError(f"conv2d_same: kernel size must be odd, got {k}")
    _check_bias("conv2d_same", bias, co)
    _check_same_dtype("conv2d_same", *(t for t in (x, weight, bias) if t is not None))
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    data = np.zeros((n, co, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            sl = np.ascontiguousarray(xp[:, :, i : i + h, j : j + w]).reshape(n, ci, h * w)
            data += np.matmul(weight.data[:, :, i, j], sl).reshape(n, co, h, w)
    if bias is not None:
        data += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def build():
        def vjp(g):
            g3 = g.reshape(n, co, h * w)
            gx = gw = gb = None
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + h, j : j + w] += np.matmul(
                            weight.data[:, :, i, j].T, g3
                        ).reshape(n, ci, h, w)
                gx = gxp[:, :, pad : pad + h, pad : pad + w]
            if weight.requires_grad:
                gw = np.empty((co, ci, k, k), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        sl = np.ascontiguousarray(xp[:, :, i : i + h, j : j + w]).reshape(n, ci, h * w)
                        gw[:, :, i, j] = np.matmul(g3, sl.swapaxes(-1, -2)).sum(axis=0)
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)
            return (gx, gw) if bias is None else (gx, gw, gb)

        return vjp

    return make_node(data, "conv2d_same", inputs, build)


def pixel_unshuffle(x: Tensor4, r: int) -> Tensor4:
    """Fold r x r spatial blocks into channels.

    Input channel c at block offset (dy, dx) lands on output channel
    c * r**2 + dy * r + dx.
    """
    n, c, h, w = x.dims
    if r < 1:
        raise ConfigError(f"pixel_unshuffle: r must be >= 1, got {r}")
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {(h, w)} not divisible by {r}")
    data = (
        x.data.reshape(n, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h // r, w // r)
    )
    data = np.ascontiguousarray(data)

    def build():
        def vjp(g):
            gx = (
                g.reshape(n, c, r, r, h // r, w // r)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, c, h, w)
            )
            return (np.ascontiguousarray(gx),)

        return vjp

    return make_node(data, "pixel_unshuffle", (x,), build)


def pixel_shuffle(x: Tensor4, r: int) -> Tensor4:
    """Unfold channels into r x r spatial blocks; inverse of pixel_unshuffle."""
    n, c, h, w = x.dims
    if r < 1:
        raise ConfigError(f"pixel_shuffle: r must be >= 1, got {r}")
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by {r * r}")
    co = c // (r * r)
    data = (
        x.data.reshape(n, co, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, co, h * r, w * r)
    )
    data = np.ascontiguousarray(data)

    def build():
        def vjp(g):
            gx = (
                g.reshape(n, co, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c, h, w)
            )
            return (np.ascontiguousarray(gx),)

        return vjp

    return make_node(data, "pixel_shuffle", (x,), build)


def roll_spatial(x: Tensor4, sy: int, sx: int) -> Tensor4:
    """Toroidal shift by (sy, sx) along (y, x)."""
    data = np.roll(x.data, (sy, sx), axis=(2, 3))

    def build():
        return lambda g: (np.roll(g, (-sy, -sx), axis=(2, 3)),)

    return make_node(data, "roll_spatial", (x,), build)


# ---------------------------------------------------------------------------
# graph construction and the backward sweep
# ---------------------------------------------------------------------------


class Graph:
    """Topologically ordered view of everything reachable from an output.

    `nodes` lists interior (op-produced) tensors with inputs before
    consumers, so a single reverse sweep settles every gradient. A graph
    is single-use: backward consumes it.
    """

    __slots__ = ("nodes", "output", "consumed")

    def __init__(self, nodes: list[Tensor4], output: Tensor4):
        self.nodes = nodes
        self.output = output
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def build_graph(output: Tensor4) -> Graph:
    """Linearize the op graph feeding `output` (iterative, no recursion)."""
    order: list[Tensor4] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor4, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node._vjp is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent._vjp is not None and id(parent) not in seen:
                stack.append((parent, False))
    return Graph(order, output)


def backward(graph: Graph, seed: Tensor4) -> None:
    """Accumulate d(seed . output)/d(leaf) into every requires_grad leaf.

    Gradients add across fan-out and across repeated backward calls on
    fresh graphs; call zero_grads between optimizer steps.
    """
    if graph.consumed:
        raise GraphError("backward called on a consumed graph")
    if seed.dims != graph.output.dims:
        raise ShapeError(f"seed dims {seed.dims} do not match output {graph.output.dims}")
    if seed.dtype != graph.output.dtype:
        raise ConfigError(f"seed dtype {seed.dtype} does not match output {graph.output.dtype}")
    graph.consumed = True

    def sink(leaf: Tensor4, g: np.ndarray) -> None:
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    if graph.output._vjp is None:
        if graph.output.requires_grad:
            sink(graph.output, seed.data)
        return

    pending: dict[int, np.ndarray] = {id(graph.output): seed.data}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._inputs, node._vjp(g)):
            if pg is None:
                continue
            if parent._vjp is None:
                if parent.requires_grad:
                    sink(parent, pg)
            else:
                held = pending.get(id(parent))
                pending[id(parent)] = pg if held is None else held + pg
