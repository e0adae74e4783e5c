"""Named parameter collection and its binary serialization.

File layout, all little-endian, no padding between fields:

    magic    8 bytes  "IPTV2WTS"
    version  u32      currently 1
    count    u32      number of entries
    entry:   u16 name length, UTF-8 name bytes,
             u8 dtype tag (0 = float64, 1 = float32),
             4 x u64 dims (n, c, h, w),
             raw values, row-major

Entries round-trip in insertion order, so two stores built the same way
serialize to byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ParseError
from .engine import F32, F64, Tensor4

MAGIC = b"IPTV2WTS"
VERSION = 1

_DTYPE_TAGS = {np.dtype(F64): 0, np.dtype(F32): 1}
_TAG_DTYPES = {0: np.dtype(F64), 1: np.dtype(F32)}


class ParamStore:
    """Ordered name -> Tensor4 map holding every learnable tensor."""

    def __init__(self):
        self._entries: dict[str, Tensor4] = {}

    def add(self, name: str, value: Tensor4) -> Tensor4:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._entries[name] = value
        return value

    def __getitem__(self, name: str) -> Tensor4:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor4]]:
        return iter(self._entries.items())

    def total_elements(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def replace(self, name: str, value: Tensor4) -> None:
        """Swap an entry in place, keeping its position in the order."""
        if name not in self._entries:
            raise ConfigError(f"unknown parameter name {name!r}")
        self._entries[name] = value


def save_params(store: ParamStore, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ConfigError(f"parameter name too long to serialize: {name[:40]}...")
        tag = _DTYPE_TAGS[np.dtype(t.dtype)]
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", tag))
        chunks.append(struct.pack("<4Q", *t.dims))
        chunks.append(np.ascontiguousarray(t.data, dtype=t.dtype).astype("<" + t.dtype.str[1:]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path, requires_grad: bool = True) -> ParamStore:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ParseError(f"truncated while reading {what}", offset=off)
        piece = blob[off : off + n]
        off += n
        return piece

    if take(8, "magic") != MAGIC:
        raise ParseError(f"bad magic, expected {MAGIC!r}", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", offset=8)
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (tag,) = struct.unpack("<B", take(1, "dtype tag"))
        if tag not in _TAG_DTYPES:
            raise ParseError(f"unknown dtype tag {tag} for {name!r}", offset=off - 1)
        dims = struct.unpack("<4Q", take(32, "dims"))
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(dims)) * dtype.itemsize
        values = np.frombuffer(take(n_bytes, f"values of {name!r}"), dtype="<" + dtype.str[1:])
        data = values.astype(dtype).reshape(dims)
        store.add(name, Tensor4(data, requires_grad=requires_grad))
    if off != len(blob):
        raise ParseError(f"{len(blob) - off} trailing bytes after last entry", offset=off)
    return store
