"""Named parameter collections and their binary wire format.

Stream layout, all integers unsigned 64-bit little-endian::

    magic (4 bytes) | version | entry count
    per entry: name length | name (UTF-8) | rank | dims... | values (float64 LE)

The same layout, under a different magic, stores datasets on disk.
"""
from __future__ import annotations

import struct
from typing import Iterable, Iterator

import numpy as np

from .errors import ContractError, FormatError

PARAM_MAGIC = b"FPPS"
VERSION = 1
_U64 = struct.Struct("<Q")
_HEADER = struct.Struct("<4sQQ")


class ParamSet:
    """Ordered mapping of parameter name to float64 array.

    Arithmetic is defined only between conforming sets (same names, same
    order, same shapes).
    """

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] = ()):
        self._entries: dict[str, np.ndarray] = {}
        for name, value in entries:
            if name in self._entries:
                raise ContractError(f"duplicate parameter name {name!r}")
            self._entries[name] = np.array(value, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def conforms(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(self[n].shape == other[n].shape for n in self._entries)

    def _check(self, other: "ParamSet"):
        if not self.conforms(other):
            raise ContractError("parameter sets do not conform (names or shapes differ)")

    def scale(self, factor: float) -> "ParamSet":
        return ParamSet((n, factor * v) for n, v in self.items())

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self._check(other)
        return ParamSet((n, v + other[n]) for n, v in self.items())

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self._check(other)
        return ParamSet((n, v - other[n]) for n, v in self.items())

    def copy(self) -> "ParamSet":
        return ParamSet(self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((n, np.zeros_like(v)) for n, v in self.items())

    def allclose(self, other: "ParamSet", atol=0.0, rtol=0.0) -> bool:
        return self.conforms(other) and all(np.allclose(v, other[n], atol=atol, rtol=rtol) for n, v in self.items())

    def bitwise_equal(self, other: "ParamSet") -> bool:
        return self.conforms(other) and all(v.tobytes() == other[n].tobytes() for n, v in self.items())

    def squared_norm(self) -> float:
        return float(sum((v * v).sum() for v in self._entries.values()))

    def __repr__(self):
        return f"ParamSet({len(self)} entries, {sum(v.size for v in self._entries.values())} values)"


def weighted_sum(sets: list[ParamSet], weights: list[float]) -> ParamSet:
    """``sum_k weights[k] * sets[k]``, accumulated in list order.

    When the weights form a convex combination and every set holds the same
    bits for an entry, that entry is copied through unchanged, so mixing
    identical models is exact rather than exact up to rounding.
    """
    if not sets or len(sets) != len(weights):
        raise ContractError("weighted_sum needs one weight per parameter set")
    for s in sets[1:]:
        sets[0]._check(s)
    convex = abs(float(np.sum(weights)) - 1.0) <= 1e-12 and min(weights) >= 0.0
    out = []
    for name in sets[0].names():
        first = sets[0][name]
        if convex and all(np.array_equal(first, s[name]) for s in sets[1:]):
            out.append((name, first.copy()))
            continue
        acc = np.zeros_like(first)
        for s, w in zip(sets, weights):
            acc += w * s[name]
        out.append((name, acc))
    return ParamSet(out)


def encode_arrays(entries: Iterable[tuple[str, np.ndarray]], magic: bytes = PARAM_MAGIC) -> bytes:
    entries = list(entries)
    chunks = [_HEADER.pack(magic, VERSION, len(entries))]
    for name, value in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_arrays(blob: bytes, magic: bytes = PARAM_MAGIC) -> list[tuple[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def need(n):
        if pos + n > len(view):
            raise FormatError(f"truncated stream: wanted {n} bytes, {len(view) - pos} left", pos)

    need(_HEADER.size)
    got_magic, version, count = _HEADER.unpack_from(view, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {bytes(got_magic)!r}, expected {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = _HEADER.size
    entries = []
    for _ in range(count):
        need(8)
        (nlen,) = _U64.unpack_from(view, pos)
        pos += 8
        need(nlen)
        try:
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", pos) from None
        pos += nlen
        need(8)
        (rank,) = _U64.unpack_from(view, pos)
        pos += 8
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(8 * n)
        values = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
        entries.append((name, values))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry", pos)
    return entries


def serialize(params: ParamSet) -> bytes:
    return encode_arrays(params.items())


def deserialize(blob: bytes) -> ParamSet:
    return ParamSet(decode_arrays(blob))
