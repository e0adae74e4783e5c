"""Images, synthetic denoising data, and PNM I/O.

The only on-disk image formats are binary PGM (P5, grayscale) and PPM
(P6, color) with maxval 255: trivially parseable, lossless, and enough
to feed the denoiser. Parse failures report the byte offset at which
the reader gave up.

Synthetic clean images combine three ingredients with per-image seeded
randomness: a smooth affine gradient, a few constant rectangles, and a
low-frequency sinusoidal texture. Values are squeezed into [0.1, 0.9]
before adding noise so that moderate noise rarely clips at 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as T
from .engine import Tensor4
from .errors import ParseError, ShapeError

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class ImageBuffer:
    """One image: 8-bit samples as (channels, h, w), channels 1 or 3."""

    channels: int
    h: int
    w: int
    samples: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ShapeError(f"channels must be 1 or 3, got {self.channels}")
        if self.samples.dtype != np.uint8:
            raise ShapeError(f"samples must be uint8, got {self.samples.dtype}")
        if self.samples.shape != (self.channels, self.h, self.w):
            raise ShapeError(
                f"samples shape {self.samples.shape} != {(self.channels, self.h, self.w)}"
            )

    @property
    def floats(self) -> np.ndarray:
        """(channels, h, w) float64 view in [0, 1]."""
        return self.samples.astype(np.float64) / 255.0

    def to_tensor(self, dtype=T.F64) -> Tensor4:
        return T.tensor(self.floats[np.newaxis], dtype=dtype)

    @classmethod
    def from_floats(cls, values: np.ndarray) -> "ImageBuffer":
        """Quantize a (c, h, w) or (1, c, h, w) float array in [0, 1]."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 4:
            if arr.shape[0] != 1:
                raise ShapeError(f"expected batch of 1, got shape {arr.shape}")
            arr = arr[0]
        if arr.ndim != 3:
            raise ShapeError(f"expected (c, h, w) floats, got shape {arr.shape}")
        samples = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        c, h, w = samples.shape
        return cls(c, h, w, samples)


# ---------------------------------------------------------------------------
# PNM I/O
# ---------------------------------------------------------------------------

_WHITESPACE = b" \t\n\r\x0b\x0c"


def read_pnm(path: str | Path) -> ImageBuffer:
    """Binary PGM/PPM reader, maxval 255 only."""
    raw = Path(path).read_bytes()
    pos = 0

    def fail(message: str):
        raise ParseError(f"{path}: {message}", offset=pos)

    def skip_separators():
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1] in _WHITESPACE:
                pos += 1
            elif raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos : pos + 1] not in b"\r\n":
                    pos += 1
            else:
                return

    def read_int(what: str) -> int:
        nonlocal pos
        skip_separators()
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            fail(f"expected {what}")
        return int(raw[start:pos])

    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        fail(f"unsupported magic {magic!r}, need binary P5 or P6")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    w = read_int("width")
    h = read_int("height")
    if w < 1 or h < 1:
        fail(f"bad dimensions {w}x{h}")
    maxval = read_int("maxval")
    if maxval != 255:
        fail(f"unsupported maxval {maxval}, only 255")
    if pos >= len(raw) or raw[pos : pos + 1] not in _WHITESPACE:
        fail("expected single whitespace byte before pixel data")
    pos += 1
    need = channels * h * w
    payload = raw[pos : pos + need]
    if len(payload) < need:
        pos = len(raw)
        fail(f"truncated pixel data, need {need} bytes, have {len(payload)}")
    flat = np.frombuffer(payload, dtype=np.uint8)
    # P6 interleaves RGB per pixel; canonical layout is planar.
    samples = flat.reshape(h, w, channels).transpose(2, 0, 1).copy()
    return ImageBuffer(channels, h, w, samples)


def write_pnm(image: ImageBuffer, path: str | Path) -> None:
    magic = "P5" if image.channels == 1 else "P6"
    header = f"{magic}\n{image.w} {image.h}\n255\n".encode("ascii")
    payload = image.samples.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# synthetic denoising pairs
# ---------------------------------------------------------------------------


def _clean_image(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((channels, size, size))
    for c in range(channels):
        plane = rng.uniform(0.2, 0.8) + rng.uniform(-0.4, 0.4) * xs + rng.uniform(-0.4, 0.4) * ys
        for _ in range(rng.integers(2, 5)):
            y0, x0 = rng.integers(0, size, 2)
            dy, dx = rng.integers(size // 8 + 1, size // 2 + 1, 2)
            plane[y0 : y0 + dy, x0 : x0 + dx] = rng.uniform(0.0, 1.0)
        fy, fx = rng.uniform(1.0, 4.0, 2)
        phase = rng.uniform(0.0, 2 * np.pi)
        plane += rng.uniform(0.05, 0.2) * np.sin(2 * np.pi * (fy * ys + fx * xs) + phase)
        img[c] = plane
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    return 0.1 + 0.8 * img


def synth_dataset(
    seed: int,
    count: int,
    size: int,
    sigma: float,
    channels: int = 3,
    stream: int = 0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(clean, noisy) float64 pairs, each (channels, size, size) in [0, 1].

    Image i draws from substream [seed, stream, i], so any image is
    reproducible on its own and train/validation pools (different
    stream values) never share noise or content.
    """
    pairs = []
    for i in range(count):
        rng = np.random.default_rng([seed, stream, i])
        clean = _clean_image(rng, channels, size)
        noisy = np.clip(clean + rng.normal(0.0, sigma / 255.0, clean.shape), 0.0, 1.0)
        pairs.append((clean, noisy))
    return pairs


# ---------------------------------------------------------------------------
# fidelity metrics
# ---------------------------------------------------------------------------


def _float_view(image) -> np.ndarray:
    return image.floats if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)


def mse(a, b) -> float:
    fa, fb = _float_view(a), _float_view(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"mse needs equal shapes, got {fa.shape} and {fb.shape}")
    return float(np.mean((fa - fb) ** 2))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) against peak 1.0, capped at 100 dB for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / err)))
