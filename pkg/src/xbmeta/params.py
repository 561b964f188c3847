"""Flat, layout-tagged parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Iterable, Mapping

import numpy as np

from .errors import LayoutError, NumericError

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def _normalize_layout(layout: Iterable) -> Layout:
    out = []
    for name, shape in layout:
        shape = tuple(int(s) for s in shape)
        if not shape or any(s < 1 for s in shape):
            raise LayoutError(f"segment {name!r} has invalid shape {shape}")
        out.append((str(name), shape))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise LayoutError(f"duplicate segment names in layout {names}")
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat float64 vector plus the (name, shape) segments it packs.

    Instances are immutable: ``values`` is a read-only array and every
    arithmetic operation returns a new vector. Vectors combine only when
    their layouts match exactly.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        layout = _normalize_layout(self.layout)
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        expected = sum(prod(shape) for _, shape in layout)
        if values.size != expected:
            raise LayoutError(
                f"layout describes {expected} values but {values.size} were given"
            )
        if not np.all(np.isfinite(values)):
            bad = self._bad_segment(values, layout)
            raise NumericError(f"non-finite parameter values in segment {bad!r}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    @staticmethod
    def _bad_segment(values, layout):
        offset = 0
        for name, shape in layout:
            n = prod(shape)
            if not np.all(np.isfinite(values[offset:offset + n])):
                return name
            offset += n
        return None

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        """Pack named arrays, in mapping order, into one vector."""
        layout = tuple((name, np.shape(a)) for name, a in arrays.items())
        if not arrays:
            raise LayoutError("cannot build a ParamVector from no arrays")
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays.values()])
        return cls(flat, layout)

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros_like(other.values), other.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def arrays(self) -> dict[str, np.ndarray]:
        """Read-only views of each segment, reshaped."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = prod(shape)
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def __len__(self) -> int:
        return self.values.size

    def _check(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout != self.layout:
            raise LayoutError("parameter layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values, self.layout)

    def axpy(self, a: float, x: "ParamVector") -> "ParamVector":
        """Return ``self + a * x``."""
        self._check(x)
        return ParamVector(self.values + float(a) * x.values, self.layout)

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return (
            isinstance(other, ParamVector)
            and other.layout == self.layout
            and self.values.tobytes() == other.values.tobytes()
        )
