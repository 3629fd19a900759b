"""Half-space constraints on the 2-D control and the control box."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HalfspaceConstraint:
    """Safe set {u : a^T u >= b}."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))
        if not (np.all(np.isfinite(a)) and np.isfinite(self.b)):
            raise ValueError("constraint entries must be finite")

    def value(self, u) -> float:
        return float(self.a @ np.asarray(u, dtype=float) - self.b)

    def holds(self, u, tol: float = 0.0) -> bool:
        return self.value(u) >= -tol

    @property
    def degenerate(self) -> bool:
        return not np.any(self.a)


@dataclass(frozen=True)
class ControlBox:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise ValueError("box bounds differ in dimension")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("box needs min < max on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, limit: float, dim: int = 2) -> "ControlBox":
        return cls((-limit,) * dim, (limit,) * dim)

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= np.array(self.lo) - tol) and np.all(u <= np.array(self.hi) + tol))

    def clip(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lo, self.hi)

    def as_halfspaces(self) -> list[HalfspaceConstraint]:
        out = []
        for k, (lo, hi) in enumerate(zip(self.lo, self.hi)):
            e = np.zeros(len(self.lo))
            e[k] = 1.0
            out.append(HalfspaceConstraint(e, lo))
            out.append(HalfspaceConstraint(-e, -hi))
        return out
