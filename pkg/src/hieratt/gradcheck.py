"""Finite-difference verification of every differentiable operation.

Each case names an operation, builds small random float64 inputs, and
exposes the op as a function of those inputs. The runner seeds the
backward pass with a fixed random weighting W, so the scalar under test
is sum(W * op(inputs)); its analytic gradient must match central
differences coordinate by coordinate.

The relative gap uses max(|analytic|, |numeric|, floor) as denominator;
the floor keeps noise on near-zero coordinates from registering as
failures.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine as T
from .errors import ConfigError
from .engine import Tensor4

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
_FLOOR = 1e-6


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Per-coordinate central differences of a scalar function."""
    work = x.astype(np.float64).copy()
    grad = np.zeros_like(work)
    flat, gflat = work.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(work)
        flat[i] = orig - step
        f_minus = f(work)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_gap(analytic: np.ndarray, numeric: np.ndarray, floor: float = _FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


@dataclass
class GradCase:
    """One differentiable op with a factory for suitable random inputs."""

    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor4], list[np.ndarray]]]


def check_case(case: GradCase, rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    """Max relative gap between autodiff and central differences."""
    op, arrays = case.build(rng)
    tensors = [T.tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weight = rng.standard_normal(out.dims)
    T.backward(T.build_graph(out), T.tensor(weight))
    worst = 0.0
    for i, arr in enumerate(arrays):
        def scalar(x: np.ndarray, _i: int = i) -> float:
            probe = [T.tensor(a) for a in arrays]
            probe[_i] = T.tensor(x)
            return float((op(*probe).data * weight).sum())

        numeric = central_difference(scalar, arr, step)
        worst = max(worst, relative_gap(tensors[i].grad, numeric))
    return worst


def _rand(rng: np.random.Generator, *dims: int) -> np.ndarray:
    return rng.standard_normal(dims)


def primitive_cases() -> list[GradCase]:
    """Every tensor-core primitive, each on a deliberately small shape."""

    def away_from_zero(rng: np.random.Generator, *dims: int) -> np.ndarray:
        # |x| >= 0.3 keeps finite differences off the |x| kink.
        x = rng.standard_normal(dims)
        return np.sign(x) * (np.abs(x) + 0.3)

    cases = [
        GradCase("add", lambda rng: (T.add, [_rand(rng, 2, 3, 2, 2), _rand(rng, 2, 3, 2, 2)])),
        GradCase("add_broadcast", lambda rng: (T.add, [_rand(rng, 2, 3, 2, 2), _rand(rng, 1, 3, 1, 1)])),
        GradCase("sub", lambda rng: (T.sub, [_rand(rng, 2, 3, 2, 2), _rand(rng, 2, 3, 2, 2)])),
        GradCase("mul", lambda rng: (T.mul, [_rand(rng, 2, 3, 2, 2), _rand(rng, 2, 3, 2, 2)])),
        GradCase("mul_broadcast", lambda rng: (T.mul, [_rand(rng, 2, 3, 2, 2), _rand(rng, 1, 3, 2, 1)])),
        GradCase("scale", lambda rng: (lambda x: T.scale(x, -1.7), [_rand(rng, 2, 2, 3, 3)])),
        GradCase("exp", lambda rng: (T.exp, [_rand(rng, 2, 2, 2, 3)])),
        GradCase("absolute", lambda rng: (T.absolute, [away_from_zero(rng, 2, 2, 3, 3)])),
        GradCase("sum_all", lambda rng: (T.sum_all, [_rand(rng, 2, 3, 2, 2)])),
        GradCase("mean_all", lambda rng: (T.mean_all, [_rand(rng, 2, 3, 2, 2)])),
        GradCase("gelu", lambda rng: (T.gelu, [_rand(rng, 2, 2, 3, 3)])),
        GradCase("softmax_lastdim", lambda rng: (T.softmax_lastdim, [_rand(rng, 2, 2, 3, 5)])),
        GradCase("l2_normalize", lambda rng: (T.l2_normalize, [away_from_zero(rng, 2, 2, 3, 4)])),
        GradCase(
            "l2_normalize_axis1",
            lambda rng: (lambda x: T.l2_normalize(x, axis=1), [away_from_zero(rng, 2, 4, 2, 3)]),
        ),
        GradCase(
            "layer_norm_channels",
            lambda rng: (
                T.layer_norm_channels,
                [_rand(rng, 2, 5, 2, 2), _rand(rng, 1, 5, 1, 1), _rand(rng, 1, 5, 1, 1)],
            ),
        ),
        GradCase("reshape", lambda rng: (lambda x: T.reshape(x, (2, 2, 9, 1)), [_rand(rng, 2, 3, 2, 3)])),
        GradCase("transpose_last2", lambda rng: (T.transpose_last2, [_rand(rng, 2, 2, 3, 4)])),
        GradCase(
            "concat_channels",
            lambda rng: (
                lambda a, b, c: T.concat_channels([a, b, c]),
                [_rand(rng, 2, 2, 2, 2), _rand(rng, 2, 3, 2, 2), _rand(rng, 2, 1, 2, 2)],
            ),
        ),
        GradCase("slice_channels", lambda rng: (lambda x: T.slice_channels(x, 1, 4), [_rand(rng, 2, 5, 2, 2)])),
        GradCase("repeat_channels", lambda rng: (lambda x: T.repeat_channels(x, 3), [_rand(rng, 2, 2, 2, 3)])),
        GradCase("tile_spatial", lambda rng: (lambda x: T.tile_spatial(x, 2, 3), [_rand(rng, 2, 2, 2, 2)])),
        GradCase("crop_spatial", lambda rng: (lambda x: T.crop_spatial(x, 2, 3), [_rand(rng, 2, 2, 4, 5)])),
        GradCase("pad_reflect_br", lambda rng: (lambda x: T.pad_reflect_br(x, 3, 2), [_rand(rng, 1, 2, 4, 3)])),
        GradCase(
            "matmul_batched",
            lambda rng: (T.matmul_batched, [_rand(rng, 2, 2, 3, 4), _rand(rng, 2, 2, 4, 2)]),
        ),
        GradCase(
            "conv_pointwise",
            lambda rng: (
                T.conv_pointwise,
                [_rand(rng, 2, 3, 3, 3), _rand(rng, 4, 3, 1, 1), _rand(rng, 1, 4, 1, 1)],
            ),
        ),
        GradCase(
            "conv_depthwise",
            lambda rng: (
                T.conv_depthwise,
                [_rand(rng, 2, 3, 4, 4), _rand(rng, 3, 1, 3, 3), _rand(rng, 1, 3, 1, 1)],
            ),
        ),
        GradCase(
            "conv2d_same",
            lambda rng: (
                T.conv2d_same,
                [_rand(rng, 2, 2, 4, 4), _rand(rng, 3, 2, 3, 3), _rand(rng, 1, 3, 1, 1)],
            ),
        ),
        GradCase("pixel_unshuffle", lambda rng: (lambda x: T.pixel_unshuffle(x, 2), [_rand(rng, 2, 2, 4, 4)])),
        GradCase("pixel_shuffle", lambda rng: (lambda x: T.pixel_shuffle(x, 2), [_rand(rng, 2, 8, 2, 2)])),
        GradCase("roll_spatial", lambda rng: (lambda x: T.roll_spatial(x, -2, -1), [_rand(rng, 2, 2, 4, 5)])),
    ]
    return cases


def all_cases() -> list[GradCase]:
    """Primitives plus composite forwards. Composites import lazily so the
    registry stays usable while higher modules are under construction."""
    cases = list(primitive_cases())
    from . import composite_gradcases

    cases.extend(composite_gradcases.cases())
    return cases


def check_model(
    config=None,
    seed: int = 0,
    samples: int = 24,
    step: float = DEFAULT_STEP,
    image_hw: tuple[int, int] = (8, 8),
) -> float:
    """Sampled finite differences through the whole network.

    The full coordinate sweep is unaffordable here, so this draws random
    (tensor, coordinate) pairs across the input image and every stored
    parameter. The output projection is re-randomized first: its zero
    initialization would otherwise stop gradients from reaching the
    trunk. Returns the worst relative gap over the sample.
    """
    from . import network

    if config is None:
        config = network.ModelConfig(
            base_channels=4, block_counts=(1, 1, 1, 1), refinement_blocks=0,
            window=4, grid=2, expansion=1.5,
        )
    rng = np.random.default_rng([seed, 0x6E657477])
    model = network.build(config, seed=seed)
    for tail, spread in (("weight", 0.05), ("bias", 0.01)):
        name = f"output_proj.{tail}"
        old = model.store[name]
        fresh = spread * rng.standard_normal(old.dims)
        model.store.replace(name, T.tensor(fresh, requires_grad=True, dtype=old.data.dtype))

    x = T.tensor(rng.uniform(0.2, 0.8, (1, config.in_channels, *image_hw)),
                 requires_grad=True, dtype=config.np_dtype)
    out = network.forward(model, x)
    weight = rng.standard_normal(out.dims)
    model.store.zero_grads()
    T.backward(T.build_graph(out), T.tensor(weight))

    def loss() -> float:
        with T.no_grad():
            return float((network.forward(model, x).data * weight).sum())

    entries = [x] + [t for _, t in model.store.items()]
    worst = 0.0
    for _ in range(samples):
        t = entries[rng.integers(len(entries))]
        idx = int(rng.integers(t.data.size))
        analytic = 0.0 if t.grad is None else float(t.grad.flat[idx])
        orig = float(t.data.flat[idx])
        t.data.flat[idx] = orig + step
        f_plus = loss()
        t.data.flat[idx] = orig - step
        f_minus = loss()
        t.data.flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        gap = abs(analytic - numeric) / max(abs(analytic), abs(numeric), _FLOOR)
        worst = max(worst, gap)
    return worst


def run(
    names: Sequence[str] | None = None,
    seed: int = 0,
    draws: int = 2,
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
) -> list[tuple[str, float, bool]]:
    """Check selected cases; returns (name, worst relative gap, ok) rows."""
    registry = {c.name: c for c in all_cases()}
    if names:
        unknown = [n for n in names if n not in registry]
        if unknown:
            raise ConfigError(f"unknown gradcheck op(s): {', '.join(unknown)}")
        picked = [registry[n] for n in names]
    else:
        picked = list(registry.values())
    rows = []
    for case in picked:
        # crc32 keeps per-case substreams stable across processes.
        rng = np.random.default_rng([seed, zlib.crc32(case.name.encode())])
        worst = max(check_case(case, rng, step) for _ in range(draws))
        rows.append((case.name, worst, worst < tol))
    return rows
