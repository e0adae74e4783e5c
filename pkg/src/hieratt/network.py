"""U-shaped restoration network assembled from FGTB blocks.

Layout: a 3x3 input projection lifts the image to C channels, three
encoder levels each halve resolution and double channels (pointwise
conv to half the channels, then pixel-unshuffle), a bottleneck level
runs at 8C, and three decoder levels mirror the encoder (pixel-shuffle,
then pointwise conv). Decoder levels 2 and 1 concatenate the matching
encoder output and reduce back with a pointwise conv; the top level has
no skip. Refinement blocks run at full resolution before a 3x3 output
projection whose result is added to the input image.

The output projection initializes to zero, so a freshly built model is
exactly the identity on any image: training starts from "change
nothing" and learns the residual.

Every learnable tensor lives in a ParamStore under a canonical name
derived from the layer tree ("enc1.block0.fcsa.qkv_pw.weight", ...);
enumerate_layers is the single source of truth for that tree, shared by
building, counting, and fusing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import engine as T
from .attention import (
    FcsaParams,
    GgsaParams,
    fcsa_forward,
    ggsa_forward,
    init_fcsa,
    init_ggsa,
)
from .engine import Tensor4
from .errors import ConfigError, ShapeError
from .ffn import (
    LeffnParams,
    RepLeffnParams,
    _names as _ffn_names,
    fuse_rep_leffn,
    init_rep_leffn,
    leffn_forward,
    load_ffn,
    rep_leffn_forward,
    store_ffn,
)
from .params import ParamStore, load_params, save_params
from .partition import GridLayout, WindowLayout, effective_grid, effective_window

_DTYPES = {"float64": T.F64, "float32": T.F32}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. block_counts are FGTB counts per level 0-3;
    each FGTB holds two attention sublayers (one windowed-channel, one
    grid-spatial), so a published "layer" count of 4 means 2 blocks.
    """

    base_channels: int = 48
    block_counts: tuple[int, int, int, int] = (2, 3, 3, 4)
    refinement_blocks: int = 2
    window: int = 32
    grid: int = 16
    expansion: float = 5.0
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    skip_mode: str = "concat"
    in_channels: int = 3
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(self.block_counts))
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if len(self.block_counts) != 4 or any(b < 1 for b in self.block_counts):
            raise ConfigError(f"block_counts must be 4 positive ints, got {self.block_counts}")
        if self.refinement_blocks < 0:
            raise ConfigError(f"refinement_blocks must be >= 0, got {self.refinement_blocks}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.grid < 1:
            raise ConfigError(f"grid must be >= 1, got {self.grid}")
        if self.expansion <= 0:
            raise ConfigError(f"expansion must be > 0, got {self.expansion}")
        if len(self.heads) != 4 or any(h < 1 for h in self.heads):
            raise ConfigError(f"heads must be 4 positive ints, got {self.heads}")
        for level, h in enumerate(self.heads):
            if self.level_channels(level) % h:
                raise ConfigError(
                    f"heads[{level}]={h} does not divide level channels "
                    f"{self.level_channels(level)}"
                )
        if self.skip_mode not in ("concat", "add"):
            raise ConfigError(f"skip_mode must be 'concat' or 'add', got {self.skip_mode!r}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    def level_channels(self, level: int) -> int:
        return self.base_channels * (1 << level)

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_json(self) -> str:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["block_counts"] = list(self.block_counts)
        out["heads"] = list(self.heads)
        return json.dumps(out, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)


# Published per-level and refinement counts are transformer layers, two
# per FGTB; expansion 5.0 comes from calibrating against the published
# parameter totals (see analysis.calibrate), landing within 1.6% on all
# three sizes.
PRESETS = {
    "small": ModelConfig(base_channels=32, block_counts=(2, 3, 3, 4), refinement_blocks=0,
                         window=32, grid=8),
    "base": ModelConfig(base_channels=48, block_counts=(2, 3, 3, 4), refinement_blocks=2,
                        window=32, grid=16),
    "base+": ModelConfig(base_channels=48, block_counts=(3, 4, 4, 5), refinement_blocks=3,
                         window=32, grid=16),
    "toy": ModelConfig(base_channels=8, block_counts=(1, 1, 1, 1), refinement_blocks=0,
                       window=8, grid=4, expansion=2.0, heads=(1, 2, 4, 8), dtype="float32"),
}


def named_config(name: str) -> ModelConfig:
    """Resolve a preset name or a path to a JSON config file."""
    if name in PRESETS:
        return PRESETS[name]
    path = Path(name)
    if path.exists():
        return ModelConfig.from_json(path.read_text())
    raise ConfigError(f"unknown config {name!r}; presets: {sorted(PRESETS)}")


# ---------------------------------------------------------------------------
# layer tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One named layer: enough to build it, count it, or locate it."""

    kind: str  # conv3x3 | fgtb | down | up | skip
    name: str
    c_in: int
    c_out: int
    level: int
    heads: int = 0


def enumerate_layers(config: ModelConfig) -> list[LayerSpec]:
    """Canonical layer order; identical to build and forward order."""
    C = config.base_channels
    layers = [LayerSpec("conv3x3", "input_proj", config.in_channels, C, 0)]

    def blocks(prefix: str, count: int, level: int):
        c = config.level_channels(level)
        for i in range(count):
            layers.append(LayerSpec("fgtb", f"{prefix}.block{i}", c, c, level, config.heads[level]))

    for level in range(3):
        blocks(f"enc{level}", config.block_counts[level], level)
        c = config.level_channels(level)
        layers.append(LayerSpec("down", f"down{level}", c, c // 2, level))
    blocks("mid", config.block_counts[3], 3)
    for level in (2, 1, 0):
        c = config.level_channels(level)
        layers.append(LayerSpec("up", f"up{level}", c // 2, c, level))
        if level > 0 and config.skip_mode == "concat":
            layers.append(LayerSpec("skip", f"skip{level}", 2 * c, c, level))
        blocks(f"dec{level}", config.block_counts[level], level)
    blocks("refine", config.refinement_blocks, 0)
    layers.append(LayerSpec("conv3x3", "output_proj", C, config.in_channels, 0))
    return layers


# ---------------------------------------------------------------------------
# FGTB blocks
# ---------------------------------------------------------------------------


@dataclass
class FgtbParams:
    ln1_scale: Tensor4
    ln1_shift: Tensor4
    fcsa: FcsaParams
    ln2_scale: Tensor4
    ln2_shift: Tensor4
    ffn1: RepLeffnParams | LeffnParams
    ln3_scale: Tensor4
    ln3_shift: Tensor4
    ggsa: GgsaParams
    ln4_scale: Tensor4
    ln4_shift: Tensor4
    ffn2: RepLeffnParams | LeffnParams


def init_fgtb(rng: np.random.Generator, config: ModelConfig, level: int) -> FgtbParams:
    c = config.level_channels(level)
    heads = config.heads[level]
    dt = config.np_dtype
    ln = lambda v: T.tensor(np.full((1, c, 1, 1), v, dtype=dt), requires_grad=True, dtype=dt)
    return FgtbParams(
        ln1_scale=ln(1.0), ln1_shift=ln(0.0),
        fcsa=init_fcsa(rng, c, heads, config.window, dtype=dt),
        ln2_scale=ln(1.0), ln2_shift=ln(0.0),
        ffn1=init_rep_leffn(rng, c, config.expansion, dtype=dt),
        ln3_scale=ln(1.0), ln3_shift=ln(0.0),
        ggsa=init_ggsa(rng, c, heads, config.grid, dtype=dt),
        ln4_scale=ln(1.0), ln4_shift=ln(0.0),
        ffn2=init_rep_leffn(rng, c, config.expansion, dtype=dt),
    )


def _ffn_apply(x: Tensor4, params) -> Tensor4:
    if isinstance(params, RepLeffnParams):
        return rep_leffn_forward(x, params)
    return leffn_forward(x, params)


def fgtb_forward(x: Tensor4, block: FgtbParams, wlayout: WindowLayout, glayout: GridLayout) -> Tensor4:
    """Four residual sublayers: FCSA, FFN, GGSA, FFN, each behind a LayerNorm."""
    x = T.add(x, fcsa_forward(T.layer_norm_channels(x, block.ln1_scale, block.ln1_shift), block.fcsa, wlayout))
    x = T.add(x, _ffn_apply(T.layer_norm_channels(x, block.ln2_scale, block.ln2_shift), block.ffn1))
    x = T.add(x, ggsa_forward(T.layer_norm_channels(x, block.ln3_scale, block.ln3_shift), block.ggsa, glayout))
    x = T.add(x, _ffn_apply(T.layer_norm_channels(x, block.ln4_scale, block.ln4_shift), block.ffn2))
    return x


def _stem(field_name: str) -> str:
    if field_name.endswith("_w"):
        return field_name[:-2] + ".weight"
    if field_name.endswith("_b"):
        return field_name[:-2] + ".bias"
    return field_name


def _store_obj(store: ParamStore, prefix: str, obj) -> None:
    for f in fields(obj):
        store.add(f"{prefix}.{_stem(f.name)}", getattr(obj, f.name))


def _load_obj(store: ParamStore, prefix: str, cls):
    return cls(**{f.name: store[f"{prefix}.{_stem(f.name)}"] for f in fields(cls)})


def store_block(store: ParamStore, prefix: str, block: FgtbParams) -> None:
    for f in fields(FgtbParams):
        value = getattr(block, f.name)
        if f.name == "fcsa":
            _store_obj(store, f"{prefix}.fcsa", value)
        elif f.name == "ggsa":
            _store_obj(store, f"{prefix}.ggsa", value)
        elif f.name in ("ffn1", "ffn2"):
            store_ffn(store, f"{prefix}.{f.name}", value)
        else:
            store.add(f"{prefix}.{_stem(f.name)}", value)


def load_block(store: ParamStore, prefix: str) -> FgtbParams:
    parts = {}
    for f in fields(FgtbParams):
        if f.name == "fcsa":
            parts[f.name] = _load_obj(store, f"{prefix}.fcsa", FcsaParams)
        elif f.name == "ggsa":
            parts[f.name] = _load_obj(store, f"{prefix}.ggsa", GgsaParams)
        elif f.name in ("ffn1", "ffn2"):
            parts[f.name] = load_ffn(store, f"{prefix}.{f.name}")
        else:
            parts[f.name] = store[f"{prefix}.{_stem(f.name)}"]
    return FgtbParams(**parts)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    config: ModelConfig
    store: ParamStore

    @property
    def fused(self) -> bool:
        return not any(".rep." in n for n in self.store.names())


def _uniform_conv(rng, dims, fan_in, dt) -> Tensor4:
    bound = 1.0 / math.sqrt(fan_in)
    return T.tensor(rng.uniform(-bound, bound, size=dims).astype(dt), requires_grad=True, dtype=dt)


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Deterministic initialization: one seed, one stream, build order."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    store = ParamStore()
    for spec in enumerate_layers(config):
        if spec.kind == "fgtb":
            store_block(store, spec.name, init_fgtb(rng, config, spec.level))
            continue
        if spec.kind == "conv3x3":
            k, fan = 3, spec.c_in * 9
        else:
            k, fan = 1, spec.c_in
        if spec.name == "output_proj":
            w = T.tensor(np.zeros((spec.c_out, spec.c_in, k, k), dtype=dt), requires_grad=True, dtype=dt)
            b = T.tensor(np.zeros((1, spec.c_out, 1, 1), dtype=dt), requires_grad=True, dtype=dt)
        else:
            w = _uniform_conv(rng, (spec.c_out, spec.c_in, k, k), fan, dt)
            b = _uniform_conv(rng, (1, spec.c_out, 1, 1), fan, dt)
        store.add(f"{spec.name}.weight", w)
        store.add(f"{spec.name}.bias", b)
    return Model(config, store)


def downsample(x: Tensor4, w: Tensor4, b: Tensor4) -> Tensor4:
    """(n, c, h, w) -> (n, 2c, h/2, w/2): halve channels pointwise, fold 2x2."""
    return T.pixel_unshuffle(T.conv_pointwise(x, w, b), 2)


def upsample(x: Tensor4, w: Tensor4, b: Tensor4) -> Tensor4:
    """(n, 2c, h, w) -> (n, c, 2h, 2w): unfold 2x2, then pointwise to target."""
    return T.conv_pointwise(T.pixel_shuffle(x, 2), w, b)


def pad_to_valid(image: Tensor4, config: ModelConfig) -> tuple[Tensor4, tuple[int, int]]:
    """Reflect-pad bottom/right so three halvings and the grid stay whole."""
    n, c, h, w = image.dims
    m = math.lcm(8, config.grid)
    ph = (m - h % m) % m
    pw = (m - w % m) % m
    if ph == 0 and pw == 0:
        return image, (h, w)
    return T.pad_reflect_br(image, ph, pw), (h, w)


def _level_layouts(config: ModelConfig, h: int, w: int, level: int) -> tuple[WindowLayout, GridLayout]:
    lh, lw = h >> level, w >> level
    p = effective_window(config.window, lh, lw)
    g = effective_grid(config.grid, lh, lw)
    return WindowLayout(lh, lw, p, shift=p // 2), GridLayout(lh, lw, g)


def forward(model: Model, image: Tensor4) -> Tensor4:
    """Restore an n x in_channels x H x W image; output matches input dims."""
    config, store = model.config, model.store
    n, c, h0, w0 = image.dims
    if c != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {c}")
    if image.dtype != np.dtype(config.np_dtype):
        raise ShapeError(f"model is {config.dtype}, image is {image.dtype}")
    padded, (h0, w0) = pad_to_valid(image, config)
    h, w = padded.dims[2], padded.dims[3]
    layouts = [_level_layouts(config, h, w, level) for level in range(4)]

    def conv(name, x, dense=False):
        fn = T.conv2d_same if dense else T.conv_pointwise
        return fn(x, store[f"{name}.weight"], store[f"{name}.bias"])

    def run_blocks(prefix, count, level, x):
        wl, gl = layouts[level]
        for i in range(count):
            x = fgtb_forward(x, load_block(store, f"{prefix}.block{i}"), wl, gl)
        return x

    x = conv("input_proj", padded, dense=True)
    saved = {}
    for level in range(3):
        x = run_blocks(f"enc{level}", config.block_counts[level], level, x)
        if level > 0:
            saved[level] = x
        x = downsample(x, store[f"down{level}.weight"], store[f"down{level}.bias"])
    x = run_blocks("mid", config.block_counts[3], 3, x)
    for level in (2, 1, 0):
        x = upsample(x, store[f"up{level}.weight"], store[f"up{level}.bias"])
        if level > 0:
            if config.skip_mode == "concat":
                x = conv(f"skip{level}", T.concat_channels([x, saved[level]]))
            else:
                x = T.add(x, saved[level])
        x = run_blocks(f"dec{level}", config.block_counts[level], level, x)
    x = run_blocks("refine", config.refinement_blocks, 0, x)
    out = T.add(conv("output_proj", x, dense=True), padded)
    if (h, w) != (h0, w0):
        out = T.crop_spatial(out, h0, w0)
    return out


def fuse_model(model: Model) -> Model:
    """Inference form: every rep FFN collapses to its plain equivalent."""
    store = ParamStore()
    for spec in enumerate_layers(model.config):
        if spec.kind != "fgtb":
            for tail in (".weight", ".bias"):
                store.add(spec.name + tail, model.store[spec.name + tail])
            continue
        block = load_block(model.store, spec.name)
        for attr in ("ffn1", "ffn2"):
            value = getattr(block, attr)
            if isinstance(value, RepLeffnParams):
                setattr(block, attr, fuse_rep_leffn(value))
        store_block(store, spec.name, block)
    return Model(model.config, store)


def save_model(model: Model, path: str | Path) -> None:
    """Weights at `path`, config JSON beside it at `path + ".json"`."""
    path = Path(path)
    save_params(model.store, path)
    Path(str(path) + ".json").write_text(model.config.to_json() + "\n")


def load_model(path: str | Path) -> Model:
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise ConfigError(f"missing config sidecar {sidecar}")
    config = ModelConfig.from_json(sidecar.read_text())
    store = load_params(path)
    expected = parameter_names(config, fused=not any(".rep." in n for n in store.names()))
    got = store.names()
    if got != expected:
        missing = sorted(set(expected) - set(got))[:3]
        extra = sorted(set(got) - set(expected))[:3]
        raise ConfigError(f"parameter names do not match config (missing {missing}, extra {extra})")
    want = np.dtype(config.np_dtype)
    for name in expected:
        if store[name].dtype != want:
            raise ConfigError(f"parameter {name} is {store[name].dtype}, config says {config.dtype}")
    return Model(config, store)


def parameter_names(config: ModelConfig, fused: bool = False) -> list[str]:
    """Exact store contents for a config, in order, without building one."""
    ffn_cls = LeffnParams if fused else RepLeffnParams
    ffn_form = "leffn" if fused else "rep"
    names: list[str] = []
    for spec in enumerate_layers(config):
        if spec.kind != "fgtb":
            names += [f"{spec.name}.weight", f"{spec.name}.bias"]
            continue
        for f in fields(FgtbParams):
            if f.name == "fcsa":
                names += [f"{spec.name}.fcsa.{_stem(g.name)}" for g in fields(FcsaParams)]
            elif f.name == "ggsa":
                names += [f"{spec.name}.ggsa.{_stem(g.name)}" for g in fields(GgsaParams)]
            elif f.name in ("ffn1", "ffn2"):
                names += [n for _, n in _ffn_names(ffn_cls, f"{spec.name}.{f.name}", ffn_form)]
            else:
                names.append(f"{spec.name}.{_stem(f.name)}")
    return names
