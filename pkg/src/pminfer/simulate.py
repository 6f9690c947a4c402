"""Forward simulation of price-volume histories and perturbations.

The simulator composes the volume design, ancestral increment sampling from
the mixture model, and accumulation of log-odds into a price path. Prices
must stay strictly inside (0,1) in double precision; paths whose log-odds
leave that representable range are a simulation fault, never clamped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .logodds import History, IncrementPath, logit, sigmoid, to_increments
from .model import ModelParams, sample_increment

__all__ = [
    "VolumeDesign",
    "SimConfig",
    "SimulationFault",
    "sample_volumes",
    "simulate_history",
    "simulate_increments",
    "perturb_increments",
    "write_history_csv",
    "read_history_csv",
]

# Beyond ~37.4 a double rounds sigmoid(x) to exactly 1.0 and the history
# leaves the open unit interval, so the practical overflow limit is far
# below the exp() overflow threshold.
LOGODDS_LIMIT = 37.0


class SimulationFault(RuntimeError):
    """Raised when a simulated path escapes the representable price range."""


@dataclass(frozen=True)
class VolumeDesign:
    """Volume sequence specification: gamma_iid, constant, or explicit."""

    kind: str
    shape: float = 2.0
    scale: float = 0.5
    value: float = 0.0
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("gamma_iid", "constant", "explicit"):
            raise ValueError(f"unknown volume design kind: {self.kind!r}")
        if self.kind == "gamma_iid" and (self.shape <= 0 or self.scale <= 0):
            raise ValueError("gamma design requires positive shape and scale")
        if self.kind == "constant" and self.value < 0:
            raise ValueError("constant volume must be nonnegative")
        if self.kind == "explicit":
            if self.values is None:
                raise ValueError("explicit design requires values")
            vals = np.asarray(self.values, dtype=np.float64)
            if np.any(vals < 0) or np.any(~np.isfinite(vals)):
                raise ValueError("explicit volumes must be finite and nonnegative")
            object.__setattr__(self, "values", vals)

    @classmethod
    def gamma_iid(cls, shape=2.0, scale=0.5):
        return cls(kind="gamma_iid", shape=shape, scale=scale)

    @classmethod
    def constant(cls, value):
        return cls(kind="constant", value=value)

    @classmethod
    def explicit(cls, values):
        return cls(kind="explicit", values=np.asarray(values, dtype=np.float64))


def sample_volumes(design: VolumeDesign, T: int, rng: np.random.Generator) -> np.ndarray:
    """Length-T nonnegative volume sequence for the given design."""
    if T < 1:
        raise ValueError("horizon must be at least 1")
    if design.kind == "gamma_iid":
        return rng.gamma(design.shape, design.scale, size=T)
    if design.kind == "constant":
        return np.full(T, float(design.value))
    if len(design.values) != T:
        raise ValueError(
            f"explicit design has {len(design.values)} values, expected {T}"
        )
    return design.values.copy()


@dataclass(frozen=True)
class SimConfig:
    """Everything needed to reproduce one simulated history."""

    T: int
    y: int
    theta: ModelParams
    design: VolumeDesign
    seed: int
    p0: float = 0.5

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0.0 < self.p0 < 1.0):
            raise ValueError("p0 must lie strictly inside (0, 1)")
        if self.y not in (0, 1):
            raise ValueError("y must be 0 or 1")


def simulate_increments(cfg: SimConfig) -> tuple[IncrementPath, np.ndarray]:
    """Sample volumes and increments only (no price-path construction)."""
    rng = np.random.default_rng(cfg.seed)
    v = sample_volumes(cfg.design, cfg.T, rng)
    dx = np.atleast_1d(sample_increment(cfg.y, v, cfg.theta, rng))
    return IncrementPath(x0=logit(cfg.p0), dx=dx), v


def simulate_history(cfg: SimConfig) -> History:
    """Simulate a full price-volume history, deterministic given cfg.seed."""
    path, v = simulate_increments(cfg)
    x = path.x0 + np.concatenate([[0.0], np.cumsum(path.dx)])
    if np.max(np.abs(x)) > LOGODDS_LIMIT:
        raise SimulationFault(
            f"log-odds path reached |x|={np.max(np.abs(x)):.2f} > {LOGODDS_LIMIT}; "
            "prices would leave the open unit interval (seed "
            f"{cfg.seed})"
        )
    return History(p=sigmoid(x), v=v)


def perturb_increments(
    h: History, sigma: float, rng: np.random.Generator, max_attempts: int = 1000
) -> tuple[History, int]:
    """Add iid Gaussian noise to the log-odds increments of a history.

    Volumes and the initial price are unchanged. If the perturbed price
    path leaves (0,1), the whole perturbation is redrawn (never clamped);
    the number of rejected draws is returned alongside the new history.
    """
    if sigma < 0:
        raise ValueError("noise level must be nonnegative")
    base = to_increments(h)
    if sigma == 0.0:
        return History(p=h.p.copy(), v=h.v.copy()), 0
    rejected = 0
    for _ in range(max_attempts):
        eps = rng.normal(0.0, sigma, size=base.horizon)
        x = base.x0 + np.concatenate([[0.0], np.cumsum(base.dx + eps)])
        if np.max(np.abs(x)) <= LOGODDS_LIMIT:
            return History(p=sigmoid(x), v=h.v.copy()), rejected
        rejected += 1
    raise SimulationFault(
        f"could not find an in-range perturbation after {max_attempts} attempts"
    )


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def write_history_csv(path_or_buf, h: History) -> None:
    """Write `t,p,v` rows; the volume cell is empty at t=0."""

    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "p", "v"])
        w.writerow([0, f"{h.p[0]:.17g}", ""])
        for t in range(1, len(h.p)):
            w.writerow([t, f"{h.p[t]:.17g}", f"{h.v[t - 1]:.17g}"])

    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, "w", newline="") as fh:
            _write(fh)
    else:
        _write(path_or_buf)


def read_history_csv(path_or_buf) -> History:
    def _read(fh):
        rows = list(csv.reader(fh))
        if not rows or rows[0] != ["t", "p", "v"]:
            raise ValueError("history CSV must start with header 't,p,v'")
        p, v = [], []
        for i, row in enumerate(rows[1:]):
            if int(row[0]) != i:
                raise ValueError(f"history CSV rows out of order at t={row[0]}")
            p.append(float(row[1]))
            if i == 0:
                if row[2] != "":
                    raise ValueError("volume must be empty at t=0")
            else:
                v.append(float(row[2]))
        return History(p=np.asarray(p), v=np.asarray(v))

    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, newline="") as fh:
            return _read(fh)
    return _read(path_or_buf)
