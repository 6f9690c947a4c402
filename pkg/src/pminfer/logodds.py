"""Log-odds coordinates for price paths.

Prices live in the open unit interval; all modeling happens on the log-odds
line. This module owns the two coordinate maps, the history container, and
the conversion between a price path and its increment representation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "History",
    "IncrementPath",
    "logit",
    "sigmoid",
    "to_increments",
    "from_increments",
]


def logit(p):
    """Map a probability in (0,1) to log-odds log(p/(1-p)).

    Accepts scalars or arrays. Raises ValueError for any value at or
    outside the open unit interval (no clamping; degenerate prices are the
    caller's bug, not ours).
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("logit requires probabilities strictly inside (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    """Inverse of :func:`logit`, evaluated in a branch-stable form.

    Stable for |x| up to 700: the exponential is only ever taken of a
    nonpositive argument, so there is no overflow.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)):
        raise ValueError("sigmoid requires finite input")
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class History:
    """A price-volume record: prices p_0..p_T and volumes v_1..v_T."""

    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64))
        if self.p.ndim != 1 or self.v.ndim != 1:
            raise ValueError("p and v must be one-dimensional")
        if len(self.p) != len(self.v) + 1:
            raise ValueError(
                f"price path length {len(self.p)} must be one more than "
                f"volume length {len(self.v)}"
            )
        if len(self.v) < 0 or len(self.p) < 1:
            raise ValueError("history needs at least an initial price")
        if np.any(~np.isfinite(self.p)) or np.any(self.p <= 0) or np.any(self.p >= 1):
            raise ValueError("all prices must lie strictly inside (0, 1)")
        if np.any(~np.isfinite(self.v)) or np.any(self.v < 0):
            raise ValueError("all volumes must be finite and nonnegative")

    @property
    def horizon(self) -> int:
        return len(self.v)


@dataclass(frozen=True, eq=False)
class IncrementPath:
    """Initial log-odds plus the sequence of log-odds increments."""

    x0: float
    dx: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        object.__setattr__(self, "x0", float(self.x0))
        object.__setattr__(self, "dx", np.asarray(self.dx, dtype=np.float64))

    @property
    def horizon(self) -> int:
        return len(self.dx)


def to_increments(h: History) -> IncrementPath:
    """Convert a history's price path into log-odds increments."""
    x = logit(h.p)
    x = np.atleast_1d(x)
    return IncrementPath(x0=x[0], dx=np.diff(x))


def from_increments(path: IncrementPath, v) -> History:
    """Rebuild a history from increments and a volume sequence.

    Inverse of :func:`to_increments` up to floating-point accumulation
    (round trips hold to well under 1e-12 on the price scale).
    """
    v = np.asarray(v, dtype=np.float64)
    if len(v) != path.horizon:
        raise ValueError("volume length must match the number of increments")
    x = path.x0 + np.concatenate([[0.0], np.cumsum(path.dx)])
    return History(p=sigmoid(x), v=v)
