"""Lossless spatial rearrangements: windows, cyclic shifts, dilated grids.

Two complementary groupings of an (n, c, h, w) map:

- window partition cuts the plane into p x p tiles, enumerated in raster
  order (top-left tile first, row-major), each tile becoming one batch
  entry of the result;
- grid partition fixes a g x g grid of equally sized cubbies and groups
  together the pixels that sit at the same offset inside their cubby.
  Group (py, px) is therefore a stride-(h/g, w/g) dilated sampling of
  the plane, laid out as a g x g map in cubby order.

Both directions are exact bijections, so each op's gradient is simply
the inverse op applied to the incoming gradient. Everything here is a
pure function and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor4, make_node, roll_spatial
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class WindowLayout:
    """Square p x p tiling of an h x w plane, with an optional shift tag.

    `shift` only records the cyclic shift the caller applies before
    partitioning; the partition itself is shift-agnostic.
    """

    h: int
    w: int
    window: int
    shift: int = 0

    def __post_init__(self):
        p = self.window
        if p < 1:
            raise ConfigError(f"window must be >= 1, got {p}")
        if self.h % p or self.w % p:
            raise ShapeError(f"window {p} does not divide plane ({self.h}, {self.w})")
        if not 0 <= self.shift < p:
            raise ConfigError(f"shift must be in [0, {p}), got {self.shift}")

    @property
    def counts(self) -> tuple[int, int]:
        return self.h // self.window, self.w // self.window

    @property
    def num_windows(self) -> int:
        ny, nx = self.counts
        return ny * nx


@dataclass(frozen=True)
class GridLayout:
    """Uniform g x g grid over an h x w plane; each cell is one cubby."""

    h: int
    w: int
    grid: int

    def __post_init__(self):
        g = self.grid
        if g < 1:
            raise ConfigError(f"grid must be >= 1, got {g}")
        if self.h % g or self.w % g:
            raise ShapeError(f"grid {g} does not divide plane ({self.h}, {self.w})")

    @property
    def cubby(self) -> tuple[int, int]:
        return self.h // self.grid, self.w // self.grid

    @property
    def groups(self) -> int:
        return (self.h * self.w) // (self.grid * self.grid)


def effective_window(p: int, h: int, w: int) -> int:
    """Largest usable window size: at most min(p, h, w) and dividing both dims.

    Feature maps deep in the network can be smaller than the configured
    window, or simply not multiples of it; clamping to a common divisor
    keeps the partition well defined everywhere.
    """
    cap = min(p, h, w)
    common = np.gcd(h, w)
    for cand in range(cap, 0, -1):
        if common % cand == 0:
            return cand
    return 1


def effective_grid(g: int, h: int, w: int) -> int:
    """Largest grid size at most g that divides both spatial dims."""
    return effective_window(g, h, w)


# ---------------------------------------------------------------------------
# raw index movements (shared by forward and gradient directions)
# ---------------------------------------------------------------------------


def _wpart(data: np.ndarray, p: int) -> np.ndarray:
    n, c, h, w = data.shape
    tiles = data.reshape(n, c, h // p, p, w // p, p)
    return np.ascontiguousarray(tiles.transpose(0, 2, 4, 1, 3, 5)).reshape(-1, c, p, p)


def _wrev(data: np.ndarray, p: int, n: int, h: int, w: int) -> np.ndarray:
    c = data.shape[1]
    tiles = data.reshape(n, h // p, w // p, c, p, p)
    return np.ascontiguousarray(tiles.transpose(0, 3, 1, 4, 2, 5)).reshape(n, c, h, w)


def _gpart(data: np.ndarray, g: int) -> np.ndarray:
    n, c, h, w = data.shape
    ch, cw = h // g, w // g
    cells = data.reshape(n, c, g, ch, g, cw)
    return np.ascontiguousarray(cells.transpose(0, 3, 5, 1, 2, 4)).reshape(-1, c, g, g)


def _grev(data: np.ndarray, g: int, n: int, h: int, w: int) -> np.ndarray:
    c = data.shape[1]
    ch, cw = h // g, w // g
    cells = data.reshape(n, ch, cw, c, g, g)
    return np.ascontiguousarray(cells.transpose(0, 3, 4, 1, 5, 2)).reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------


def window_partition(x: Tensor4, layout: WindowLayout) -> Tensor4:
    """(n, c, h, w) -> (n * num_windows, c, p, p), raster window order."""
    n, c, h, w = x.dims
    if (h, w) != (layout.h, layout.w):
        raise ShapeError(f"layout is for ({layout.h}, {layout.w}), input is ({h}, {w})")
    p = layout.window
    data = _wpart(x.data, p)

    def build():
        return lambda g: (_wrev(g, p, n, h, w),)

    return make_node(data, "window_partition", (x,), build)


def window_reverse(windows: Tensor4, layout: WindowLayout, n: int) -> Tensor4:
    """Exact inverse of window_partition for a batch of n maps."""
    p = layout.window
    nw, c, ph, pw = windows.dims
    if (ph, pw) != (p, p):
        raise ShapeError(f"windows are {ph}x{pw}, layout expects {p}x{p}")
    if nw != n * layout.num_windows:
        raise ShapeError(
            f"window count {nw} does not match {n} maps of {layout.num_windows} windows"
        )
    h, w = layout.h, layout.w
    data = _wrev(windows.data, p, n, h, w)

    def build():
        return lambda g: (_wpart(g, p),)

    return make_node(data, "window_reverse", (windows,), build)


def cyclic_shift(x: Tensor4, s: int) -> Tensor4:
    """Toroidal roll by (-s, -s); pairs with cyclic_unshift."""
    _check_shift(x, s)
    return roll_spatial(x, -s, -s)


def cyclic_unshift(x: Tensor4, s: int) -> Tensor4:
    _check_shift(x, s)
    return roll_spatial(x, s, s)


def _check_shift(x: Tensor4, s: int) -> None:
    if not 0 <= s < min(x.dims[2], x.dims[3]):
        raise ConfigError(f"shift {s} out of range for plane {x.dims[2:]}")


def grid_partition(x: Tensor4, layout: GridLayout) -> Tensor4:
    """(n, c, h, w) -> (n * groups, c, g, g), groups in raster within-cubby order."""
    n, c, h, w = x.dims
    if (h, w) != (layout.h, layout.w):
        raise ShapeError(f"layout is for ({layout.h}, {layout.w}), input is ({h}, {w})")
    g = layout.grid
    data = _gpart(x.data, g)

    def build():
        return lambda grad: (_grev(grad, g, n, h, w),)

    return make_node(data, "grid_partition", (x,), build)


def grid_reverse(groups: Tensor4, layout: GridLayout, n: int) -> Tensor4:
    """Exact inverse of grid_partition for a batch of n maps."""
    g = layout.grid
    ng, c, gh, gw = groups.dims
    if (gh, gw) != (g, g):
        raise ShapeError(f"groups are {gh}x{gw}, layout expects {g}x{g}")
    if ng != n * layout.groups:
        raise ShapeError(f"group count {ng} does not match {n} maps of {layout.groups} groups")
    h, w = layout.h, layout.w
    data = _grev(groups.data, g, n, h, w)

    def build():
        return lambda grad: (_gpart(grad, g),)

    return make_node(data, "grid_reverse", (groups,), build)
