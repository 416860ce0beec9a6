"""Flat parameter vectors, layout metadata, and a counter-based RNG.

Everything downstream moves parameters around as a single f64 vector with
layer structure kept in layout metadata only. The RNG is counter-based
(seed + counter -> output block) so streams are replayable and splitting
is O(1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def _layout_size(layout: Layout) -> int:
    total = 0
    for _, shape in layout:
        n = 1
        for s in shape:
            n *= s
        total += n
    return total


@dataclass(frozen=True)
class ParamVector:
    """A flat f64 vector plus an ordered (name, shape) layout.

    Two vectors support elementwise arithmetic iff their layouts are equal;
    mismatched layouts raise :class:`ContractError`.
    """

    data: np.ndarray
    layout: Layout

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 1:
            data = data.reshape(-1)
        object.__setattr__(self, "data", data)
        if data.size != _layout_size(self.layout):
            raise ContractError(
                f"data length {data.size} does not match layout size "
                f"{_layout_size(self.layout)}"
            )

    @property
    def dim(self) -> int:
        return self.data.size

    def like(self, data: np.ndarray) -> "ParamVector":
        """Wrap a raw array in this vector's layout."""
        return ParamVector(data, self.layout)

    def _check(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ContractError("layout mismatch between ParamVectors")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.data + other.data, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.data - other.data, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.data * float(scalar), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.data, self.layout)


def zeros(layout: Layout) -> ParamVector:
    return ParamVector(np.zeros(_layout_size(layout)), layout)


def dot(a: ParamVector, b: ParamVector) -> float:
    """Euclidean inner product; layouts must match."""
    a._check(b)
    return float(np.dot(a.data, b.data))


def global_norm(a: ParamVector) -> float:
    return float(np.sqrt(np.dot(a.data, a.data)))


# SplitMix64 mixing constants.
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


class Rng:
    """Counter-based generator: output block i is a pure function of (seed, counter+i).

    Identical (seed, counter) pairs produce identical streams on every
    platform. ``split`` derives an independent child stream and advances the
    parent by one draw.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def clone(self) -> "Rng":
        return Rng(self.seed, self.counter)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + _GOLDEN * idx)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        """n standard normal doubles (Box-Muller)."""
        m = (n + 1) // 2
        u = self._raw(2 * m)
        u1 = ((u[:m] >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0**-53)
        u2 = (u[m:] >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform in [0, bound)."""
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def split(self) -> "Rng":
        """Derive an independent child stream; advances this stream by one."""
        child_seed = int(self._raw(1)[0])
        return Rng(child_seed, 0)


def rademacher(rng: Rng, n: int) -> np.ndarray:
    """n independent +-1 entries; deterministic given (seed, counter)."""
    if n < 1:
        raise ContractError("rademacher requires n >= 1")
    bits = rng._raw(n) >> np.uint64(63)
    return bits.astype(np.float64) * 2.0 - 1.0
