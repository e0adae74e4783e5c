"""Runnable invariant suite behind the `selfcheck` subcommand.

Each check re-derives its expected values independently of the library
code under test (plain numpy loops, closed forms, or published
constants) and raises AssertionError with a measured value on failure.
This is the fast subset of the package's verification: structural
equivalences, degenerations, calibration, determinism. The long
training experiment is exercised by the test suite, not here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import engine as T
from . import gradcheck, network
from .analysis import PUBLISHED_PARAMS, count_params, dense_reference_macs, fgtb_mac_breakdown
from .attention import init_fcsa, init_ggsa, fcsa_forward, ggsa_forward, relative_position_bias
from .data import ImageBuffer, read_pnm, write_pnm
from .ffn import fuse_rep_leffn, init_rep_leffn, leffn_forward, rep_leffn_forward
from .optim import AdamWState, adamw_step
from .partition import (
    GridLayout,
    WindowLayout,
    grid_partition,
    grid_reverse,
    window_partition,
    window_reverse,
)
from .train import Stage, TrainConfig, train_toy


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_partition_bijections() -> str:
    rng = np.random.default_rng(101)
    combos = 0
    for h, w in ((4, 4), (6, 4), (8, 12), (16, 8), (12, 12)):
        for p in (1, 2, 4):
            if h % p or w % p:
                continue
            for s in range(0, p):
                x = T.tensor(rng.standard_normal((2, 3, h, w)))
                wl = WindowLayout(h, w, p, shift=s)
                back = window_reverse(window_partition(x, wl), wl, 2)
                assert np.array_equal(back.data, x.data), (h, w, p, s)
                combos += 1
            if h % p == 0 and w % p == 0:
                gl = GridLayout(h, w, p)
                x = T.tensor(rng.standard_normal((1, 2, h, w)))
                back = grid_reverse(grid_partition(x, gl), gl, 1)
                assert np.array_equal(back.data, x.data), (h, w, p)
                combos += 1
    return f"{combos} round trips bit-exact"


def check_gradients() -> str:
    rows = gradcheck.run(draws=1)
    bad = [(n, g) for n, g, ok in rows if not ok]
    assert not bad, f"failing ops: {bad}"
    worst = max(g for _, g, _ in rows)
    return f"{len(rows)} ops, worst relative gap {worst:.2e}"


def check_network_gradients() -> str:
    worst = gradcheck.check_model(seed=0, samples=12)
    assert worst < 1e-3, f"worst relative gap {worst:.2e}"
    return f"sampled end-to-end gap {worst:.2e}"


def check_fusion_equivalence() -> str:
    worst64 = 0.0
    for trial in range(20):
        rng = np.random.default_rng([7, trial])
        c = int(rng.integers(2, 6))
        params = init_rep_leffn(rng, c, expansion=float(rng.uniform(1.0, 3.0)))
        fused = fuse_rep_leffn(params)
        x = T.tensor(rng.standard_normal((1, c, 5, 4)))
        gap = float(np.max(np.abs(rep_leffn_forward(x, params).data - leffn_forward(x, fused).data)))
        worst64 = max(worst64, gap)
    assert worst64 < 1e-10, f"float64 fusion gap {worst64:.2e}"
    worst32 = 0.0
    for trial in range(5):
        rng = np.random.default_rng([8, trial])
        params = init_rep_leffn(rng, 4, expansion=2.0, dtype=np.float32)
        fused = fuse_rep_leffn(params)
        x = T.tensor(rng.standard_normal((1, 4, 6, 6)), dtype=T.F32)
        gap = float(np.max(np.abs(rep_leffn_forward(x, params).data - leffn_forward(x, fused).data)))
        worst32 = max(worst32, gap)
    assert worst32 < 1e-5, f"float32 fusion gap {worst32:.2e}"
    return f"64-bit gap {worst64:.2e}, 32-bit gap {worst32:.2e}"


def _dense_spatial_attention(x, pw_w, pw_b, table, out_w, out_b, heads):
    """Dense full-map spatial attention, plain numpy: the target GGSA
    degenerates to when one grid group covers every pixel."""
    n, c, h, w = x.shape
    d = c // heads
    qkv = np.einsum("oi,nihw->nohw", pw_w[:, :, 0, 0], x) + pw_b.reshape(1, -1, 1, 1)
    q, k, v = np.split(qkv, 3, axis=1)
    g = table.shape[-1]
    g = (math.isqrt(g) + 1) // 2  # table rows span (2g-1)^2 displacements
    out = np.zeros_like(x)
    for b in range(n):
        for head in range(heads):
            def tokens(a):
                return a[b, head * d : (head + 1) * d].reshape(d, h * w).T

            qt, kt, vt = tokens(q), tokens(k), tokens(v)
            bias = np.zeros((h * w, h * w))
            for i in range(h * w):
                for j in range(h * w):
                    dy = i // w - j // w + g - 1
                    dx = i % w - j % w + g - 1
                    bias[i, j] = table[0, head, 0, dy * (2 * g - 1) + dx]
            att = _softmax_rows(qt @ kt.T / math.sqrt(d) + bias)
            out[b, head * d : (head + 1) * d] = (att @ vt).T.reshape(d, h, w)
    return np.einsum("oi,nihw->nohw", out_w[:, :, 0, 0], out) + out_b.reshape(1, -1, 1, 1)


def check_ggsa_degeneration() -> str:
    rng = np.random.default_rng(31)
    c, heads, h = 4, 2, 4
    params = init_ggsa(rng, c, heads, grid=h)
    bias = 0.3 * rng.standard_normal(params.bias_table.dims)
    params = replace(params, bias_table=T.tensor(bias))
    x = T.tensor(rng.standard_normal((2, c, h, h)))
    got = ggsa_forward(x, params, GridLayout(h, h, h)).data
    want = _dense_spatial_attention(
        x.data, params.qkv_pw_w.data, params.qkv_pw_b.data,
        params.bias_table.data, params.out_pw_w.data, params.out_pw_b.data, heads,
    )
    gap = float(np.max(np.abs(got - want)))
    assert gap < 1e-10, f"GGSA dense degeneration gap {gap:.2e}"
    return f"dense-attention gap {gap:.2e}"


def check_fcsa_degeneration() -> str:
    rng = np.random.default_rng(32)
    c, heads, p = 6, 3, 4
    d = c // heads
    params = init_fcsa(rng, c, heads, window=p)
    ones = np.ones((1, heads, p, p))
    params = replace(params, token_weight=T.tensor(ones), merge_top=T.tensor(ones),
                     merge_bottom=T.tensor(np.zeros_like(ones)))
    x = T.tensor(rng.standard_normal((1, c, p, p)))
    got = fcsa_forward(x, params, WindowLayout(p, p, p, shift=0)).data

    # independent whole-map channel attention
    def conv(a, wt, bias):
        return np.einsum("oi,nihw->nohw", wt[:, :, 0, 0], a) + bias.reshape(1, -1, 1, 1)

    pre = conv(x.data, params.qkv_pw_w.data, params.qkv_pw_b.data)
    dww, dwb = params.qkv_dw_w.data, params.qkv_dw_b.data
    padded = np.pad(pre, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dw = np.zeros_like(pre)
    for ch in range(3 * c):
        for i in range(p):
            for j in range(p):
                dw[:, ch, i, j] = np.sum(padded[:, ch, i : i + 3, j : j + 3] * dww[ch, 0], axis=(1, 2))
    dw += dwb.reshape(1, -1, 1, 1)
    q, k, v = dw[:, :c], dw[:, c : 2 * c], dw[:, 2 * c :]
    alpha = np.exp(params.log_temperature.data.reshape(-1))
    if alpha.size == 1:
        alpha = np.repeat(alpha, heads)
    out = np.zeros_like(q)
    for head in range(heads):
        sl = slice(head * d, (head + 1) * d)
        qt = q[0, sl].reshape(d, -1)
        kt = k[0, sl].reshape(d, -1)
        vt = v[0, sl].reshape(d, -1)
        qn = qt / np.linalg.norm(qt, axis=1, keepdims=True)
        kn = kt / np.linalg.norm(kt, axis=1, keepdims=True)
        att = _softmax_rows(qn @ kn.T / alpha[head])
        out[0, sl] = (att @ vt).reshape(d, p, p)
    want = conv(out, params.out_pw_w.data, params.out_pw_b.data)
    gap = float(np.max(np.abs(got - want)))
    assert gap < 1e-10, f"FCSA whole-map degeneration gap {gap:.2e}"
    return f"channel-attention gap {gap:.2e}"


def check_bias_symmetry() -> str:
    # Opposite displacements index symmetric table entries: idx + idx.T
    # is constant.
    rng = np.random.default_rng(33)
    for g in (2, 3, 4):
        table = T.tensor(rng.standard_normal((1, 2, 1, (2 * g - 1) ** 2)))
        bias = relative_position_bias(g, table).data[0, 0]
        flat = table.data[0, 0, 0]
        for i in range(g * g):
            for j in range(g * g):
                dy, dx = i // g - j // g, i % g - j % g
                want = flat[(dy + g - 1) * (2 * g - 1) + (dx + g - 1)]
                assert bias[i, j] == want, (g, i, j)
    return "displacement indexing verified for g in {2,3,4}"


def check_mac_scaling() -> str:
    cfg = network.PRESETS["base"]
    for level in range(4):
        lo = fgtb_mac_breakdown(cfg, level, 128, 128)
        hi = fgtb_mac_breakdown(cfg, level, 256, 256)
        for key in ("fcsa", "ggsa", "ffn"):
            assert hi[key] == 4 * lo[key], (level, key, hi[key] / lo[key])
    ratio = dense_reference_macs(cfg, 256, 256) / dense_reference_macs(cfg, 128, 128)
    assert ratio == 16.0, ratio
    return "attention rows x4.000, dense reference x16"


def check_param_calibration() -> str:
    devs = {}
    for name, target in PUBLISHED_PARAMS.items():
        got = count_params(network.PRESETS[name], fused=True)
        devs[name] = (got - target) / target
        assert abs(devs[name]) < 0.05, f"{name}: {devs[name]:+.2%}"
    listing = ", ".join(f"{k} {v:+.2%}" for k, v in devs.items())
    return f"within 5%: {listing}"


def check_shape_closure() -> str:
    cfg = network.ModelConfig(base_channels=4, block_counts=(1, 1, 1, 1),
                              refinement_blocks=0, window=4, grid=2, expansion=1.0)
    model = network.build(cfg, seed=0)
    rng = np.random.default_rng(55)
    sizes = [(1, 1), (3, 5), (8, 8)] + [tuple(rng.integers(1, 97, 2)) for _ in range(5)]
    for h, w in sizes:
        x = T.tensor(rng.uniform(0, 1, (1, 3, int(h), int(w))))
        out = network.forward(model, x)
        assert out.dims == x.dims, (h, w, out.dims)
    return f"{len(sizes)} sizes preserved dims"


def check_identity_init() -> str:
    cfg = network.ModelConfig(base_channels=4, block_counts=(1, 1, 1, 1),
                              refinement_blocks=0, window=4, grid=2, expansion=1.0)
    model = network.build(cfg, seed=1)
    rng = np.random.default_rng(56)
    x = T.tensor(rng.uniform(0, 1, (1, 3, 19, 26)))
    out = network.forward(model, x)
    assert np.array_equal(out.data, x.data), "fresh model is not the identity"
    return "fresh model reproduces input bit-exactly"


def check_train_determinism() -> str:
    cfg = network.PRESETS["toy"]
    tc = TrainConfig(seed=5, iterations=3, schedule=(Stage(16, 2, 0),),
                     val_images=1, val_every=10, val_size=24, pool_images=3)
    a = train_toy(cfg, tc)
    b = train_toy(cfg, tc)
    for (name, ta), (_, tb) in zip(a.model.store.items(), b.model.store.items()):
        assert np.array_equal(ta.data, tb.data), name
    return "3-iteration rerun bit-identical"


def check_optimizer_decay() -> str:
    p = {"w": np.full((2, 2), 2.0)}
    g = {"w": np.zeros((2, 2))}
    adamw_step(p, g, AdamWState(), lr=0.1, weight_decay=0.01)
    assert np.array_equal(p["w"], np.full((2, 2), 2.0 * (1 - 0.1 * 0.01))), p["w"]
    return "zero-grad step shrinks params by exactly (1 - lr*wd)"


def check_pnm_roundtrip() -> str:
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(57)
    with tempfile.TemporaryDirectory() as tmp:
        for channels in (1, 3):
            img = ImageBuffer(channels, 5, 7,
                              rng.integers(0, 256, (channels, 5, 7), dtype=np.uint8))
            path = Path(tmp) / f"t{channels}.pnm"
            write_pnm(img, path)
            back = read_pnm(path)
            assert np.array_equal(back.samples, img.samples)
            assert (back.channels, back.h, back.w) == (channels, 5, 7)
    return "P5 and P6 write/read bit-exact"


CHECKS: tuple[tuple[str, Callable[[], str]], ...] = (
    ("partition_bijections", check_partition_bijections),
    ("gradient_suite", check_gradients),
    ("network_gradients", check_network_gradients),
    ("fusion_equivalence", check_fusion_equivalence),
    ("ggsa_dense_degeneration", check_ggsa_degeneration),
    ("fcsa_channel_degeneration", check_fcsa_degeneration),
    ("bias_displacement_indexing", check_bias_symmetry),
    ("mac_scaling", check_mac_scaling),
    ("param_calibration", check_param_calibration),
    ("shape_closure", check_shape_closure),
    ("identity_initialization", check_identity_init),
    ("training_determinism", check_train_determinism),
    ("optimizer_decoupled_decay", check_optimizer_decay),
    ("pnm_roundtrip", check_pnm_roundtrip),
)


def run_all(emit: Callable[[str], None] = print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        try:
            detail = fn()
            results.append(CheckResult(name, True, detail))
            emit(f"PASS {name}: {detail}")
        except Exception as exc:  # a failed invariant, whatever the form
            results.append(CheckResult(name, False, str(exc)))
            emit(f"FAIL {name}: {exc}")
    return results
