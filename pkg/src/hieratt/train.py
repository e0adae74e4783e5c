"""Toy-scale denoising training: progressive patch schedule over
synthetic Gaussian pairs, AdamW with cosine annealing, periodic
validation PSNR at full image size.

Default schedule is a scaled echo of large-patch progressive training:
32x32 patches at batch 4, then 48x48 at batch 2 from iteration 600.
With a fixed seed and a fixed thread count the whole run is
bit-reproducible: every random draw comes from named substreams of the
config seed, and the optimizer mutates parameters in place in a fixed
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as T
from . import network
from .data import psnr, synth_dataset
from .engine import Tensor4
from .errors import ConfigError, ShapeError
from .optim import AdamWState, adamw_step, clip_grads, cosine_lr
from .runtime import parallel_map

_TRAIN_STREAM = 0
_VAL_STREAM = 1
_CROP_STREAM = 2

LOSS_KINDS = ("l1", "l2")


@dataclass(frozen=True)
class Stage:
    """One rung of the progressive schedule."""

    patch: int
    batch: int
    start: int


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    lr0: float = 3e-4
    lr1: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    sigma: float = 25.0
    schedule: tuple[Stage, ...] = (Stage(32, 4, 0), Stage(48, 2, 600))
    loss: str = "l1"
    pool_images: int = 32
    val_images: int = 8
    val_every: int = 100
    val_size: int = 64
    grad_clip: float | None = None
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(self.schedule))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not self.schedule:
            raise ConfigError("schedule must have at least one stage")
        if self.schedule[0].start != 0:
            raise ConfigError(f"first stage must start at iteration 0, got {self.schedule[0].start}")
        starts = [s.start for s in self.schedule]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"stage starts must strictly increase, got {starts}")
        for s in self.schedule:
            if s.patch < 1 or s.batch < 1:
                raise ConfigError(f"stage patch and batch must be >= 1, got {s}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.val_every < 1:
            raise ConfigError(f"val_every must be >= 1, got {self.val_every}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    lr: float
    loss: float
    val_psnr: float | None = None


@dataclass
class TrainResult:
    model: network.Model
    metrics: list[MetricsRow] = field(default_factory=list)
    noisy_psnr: float = 0.0
    final_psnr: float = 0.0


def loss_fn(pred: Tensor4, target: Tensor4, kind: str = "l1") -> Tensor4:
    """Scalar training loss as a graph node; mean absolute or squared error."""
    if pred.dims != target.dims:
        raise ShapeError(f"loss needs equal dims, got {pred.dims} and {target.dims}")
    diff = T.sub(pred, target)
    if kind == "l1":
        return T.mean_all(T.absolute(diff))
    if kind == "l2":
        return T.mean_all(T.mul(diff, diff))
    raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {kind!r}")


def _validate_schedule(model_config: network.ModelConfig, cfg: TrainConfig) -> None:
    # Patches must survive three halvings and grid partition without
    # padding, and fit inside the synthesized pool images.
    m = int(np.lcm(8, model_config.grid))
    for s in cfg.schedule:
        if s.patch % m:
            raise ConfigError(
                f"stage patch {s.patch} is not a multiple of {m} (8 and the grid must divide it)"
            )
    largest = max(s.patch for s in cfg.schedule)
    if largest > min(cfg.val_size, _pool_size(cfg)):
        raise ConfigError(f"largest patch {largest} exceeds the synthesized image size")
    if cfg.val_size % m:
        raise ConfigError(f"val_size {cfg.val_size} is not a multiple of {m}")


def _pool_size(cfg: TrainConfig) -> int:
    # Pool images leave room to crop the largest patch at an offset.
    return max(s.patch for s in cfg.schedule) + 16


def _stage_at(cfg: TrainConfig, iteration: int) -> Stage:
    active = cfg.schedule[0]
    for s in cfg.schedule:
        if s.start <= iteration:
            active = s
    return active


def _augment_pair(rng: np.random.Generator, clean: np.ndarray, noisy: np.ndarray):
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    clean = np.rot90(clean, k, axes=(1, 2))
    noisy = np.rot90(noisy, k, axes=(1, 2))
    if flip:
        clean = clean[:, :, ::-1]
        noisy = noisy[:, :, ::-1]
    return clean, noisy


def _batch(pool, rng, stage: Stage, dtype, augment: bool):
    cleans, noisies = [], []
    for _ in range(stage.batch):
        clean, noisy = pool[int(rng.integers(len(pool)))]
        size = clean.shape[1]
        y0 = int(rng.integers(size - stage.patch + 1))
        x0 = int(rng.integers(size - stage.patch + 1))
        cc = clean[:, y0 : y0 + stage.patch, x0 : x0 + stage.patch]
        nn = noisy[:, y0 : y0 + stage.patch, x0 : x0 + stage.patch]
        if augment:
            cc, nn = _augment_pair(rng, cc, nn)
        cleans.append(cc)
        noisies.append(nn)
    return (
        T.tensor(np.ascontiguousarray(np.stack(cleans)), dtype=dtype),
        T.tensor(np.ascontiguousarray(np.stack(noisies)), dtype=dtype),
    )


def validation_psnr(model: network.Model, val_pairs, dtype) -> float:
    """Mean PSNR of restored validation images, full size, no grad."""

    def one(pair) -> float:
        clean, noisy = pair
        with T.no_grad():
            out = network.forward(model, T.tensor(noisy[np.newaxis], dtype=dtype))
        return psnr(np.clip(out.data[0].astype(np.float64), 0.0, 1.0), clean)

    return float(np.mean(parallel_map(one, val_pairs)))


def train_toy(model_config: network.ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Train a fresh model on synthetic denoising; returns model + log."""
    _validate_schedule(model_config, cfg)
    dtype = model_config.np_dtype
    channels = model_config.in_channels

    pool = synth_dataset(cfg.seed, cfg.pool_images, _pool_size(cfg), cfg.sigma,
                         channels=channels, stream=_TRAIN_STREAM)
    val = synth_dataset(cfg.seed, cfg.val_images, cfg.val_size, cfg.sigma,
                        channels=channels, stream=_VAL_STREAM)
    noisy_psnr = float(np.mean([psnr(noisy, clean) for clean, noisy in val]))

    model = network.build(model_config, seed=cfg.seed)
    params = {name: t.data for name, t in model.store.items()}
    state = AdamWState()
    crop_rng = np.random.default_rng([cfg.seed, _CROP_STREAM])

    result = TrainResult(model=model, noisy_psnr=noisy_psnr)
    for iteration in range(cfg.iterations):
        stage = _stage_at(cfg, iteration)
        lr = cosine_lr(iteration, cfg.iterations, cfg.lr0, cfg.lr1)
        clean, noisy = _batch(pool, crop_rng, stage, dtype, cfg.augment)
        pred = network.forward(model, noisy)
        loss = loss_fn(pred, clean, cfg.loss)
        model.store.zero_grads()
        T.backward(T.build_graph(loss), T.tensor(np.ones((1, 1, 1, 1)), dtype=dtype))
        grads = {name: t.grad for name, t in model.store.items()}
        if cfg.grad_clip is not None:
            clip_grads(grads, cfg.grad_clip)
        adamw_step(params, grads, state, lr, cfg.betas, cfg.weight_decay)

        row = MetricsRow(iteration, lr, float(loss.data.reshape(())))
        last = iteration == cfg.iterations - 1
        if (iteration + 1) % cfg.val_every == 0 or last:
            row = MetricsRow(row.iteration, row.lr, row.loss,
                             validation_psnr(model, val, dtype))
        result.metrics.append(row)

    result.final_psnr = (
        result.metrics[-1].val_psnr
        if result.metrics and result.metrics[-1].val_psnr is not None
        else validation_psnr(model, val, dtype)
    )
    return result


def windowed_loss_mean(metrics: list[MetricsRow], window: tuple[int, int]) -> float:
    lo, hi = window
    vals = [m.loss for m in metrics if lo <= m.iteration < hi]
    if not vals:
        raise ConfigError(f"no recorded losses in iteration window [{lo}, {hi})")
    return float(np.mean(vals))
