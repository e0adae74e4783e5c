"""Hierarchical window/grid attention image restoration, numerically verifiable.

A small reference implementation of a U-shaped restoration transformer
that alternates channel attention inside shifted local windows with
biased spatial attention across a dilated global grid, plus the
re-parameterized feed-forward blocks that fuse into plain convolutions
for inference. Everything runs on a rank-4 tensor engine with
reverse-mode differentiation that this package also provides, so every
claimed equivalence (fusion, degenerations, gradient correctness, cost
scaling) is checkable to tight tolerances on a desktop machine.
"""

from .errors import (
    ConfigError,
    GraphError,
    HierattError,
    NumericsError,
    ParseError,
    ShapeError,
)
from .params import ParamStore, load_params, save_params
from .engine import Graph, Tensor4, backward, build_graph, no_grad, set_debug_checks, tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GraphError",
    "Graph",
    "HierattError",
    "NumericsError",
    "ParamStore",
    "ParseError",
    "ShapeError",
    "Tensor4",
    "backward",
    "build_graph",
    "load_params",
    "no_grad",
    "save_params",
    "set_debug_checks",
    "tensor",
    "__version__",
]
