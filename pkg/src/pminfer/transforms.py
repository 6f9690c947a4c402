"""Bijections between the constrained parameter space and R^d.

Every scalar parameter is interval-bounded, so each gets a logit-affine
map; the simplex weights get an additive-log-ratio map. SMC rejuvenation,
the variational fits, and the projection-gap search all share this module
so they explore exactly the same space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .logodds import sigmoid
from .model import PARAM_NAMES, ModelParams, ParamBounds

__all__ = ["IntervalTransform", "ParamTransform"]

# Unconstrained coordinates are kept in a numerically sane window; the
# interval endpoints themselves map to +/-inf and are never reachable.
_Z_CLIP = 35.0


@dataclass(frozen=True)
class IntervalTransform:
    """theta = lo + (hi - lo) * sigmoid(z) for a single bounded scalar."""

    lo: float
    hi: float

    def to_natural(self, z):
        return self.lo + (self.hi - self.lo) * sigmoid(np.asarray(z, dtype=np.float64))

    def to_unconstrained(self, theta):
        u = (np.asarray(theta, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        with np.errstate(divide="ignore"):
            out = np.log(u) - np.log1p(-u)
        return np.clip(out, -_Z_CLIP, _Z_CLIP)

    def log_jacobian(self, z):
        """log |d theta / d z| = log(hi-lo) + log sig(z) + log sig(-z)."""
        z = np.asarray(z, dtype=np.float64)
        return np.log(self.hi - self.lo) - np.logaddexp(0.0, -z) - np.logaddexp(0.0, z)

    def dtheta_dz(self, z):
        z = np.asarray(z, dtype=np.float64)
        s = sigmoid(z)
        return (self.hi - self.lo) * s * (1.0 - s)

    def dlogjac_dz(self, z):
        return 1.0 - 2.0 * sigmoid(np.asarray(z, dtype=np.float64))


def _alr_forward(z):
    """(z1, z2) -> simplex weights softmax([z1, z2, 0])."""
    z = np.asarray(z, dtype=np.float64)
    logits = np.concatenate([z, np.zeros(z.shape[:-1] + (1,))], axis=-1)
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _alr_inverse(omega):
    omega = np.asarray(omega, dtype=np.float64)
    w = np.clip(omega, 1e-300, None)
    return np.stack(
        [np.log(w[..., 0]) - np.log(w[..., 2]), np.log(w[..., 1]) - np.log(w[..., 2])],
        axis=-1,
    )


def _alr_log_jacobian(omega):
    """log |det d omega / d z| = sum_k log omega_k for the 3-simplex."""
    w = np.clip(np.asarray(omega, dtype=np.float64), 1e-300, None)
    return np.sum(np.log(w), axis=-1)


class ParamTransform:
    """Maps between full 18-vector parameters and active unconstrained coords.

    `active_scalars` lists flat names of non-fixed scalar coordinates;
    `omega_active` controls whether the simplex block is part of the map.
    Inactive coordinates are filled from `base`, which also supplies values
    during partial searches (point-mass priors, restricted optimizations).
    """

    def __init__(
        self,
        bounds: ParamBounds,
        base: ModelParams,
        active_scalars: tuple[str, ...] | None = None,
        omega_active: bool = True,
    ):
        if active_scalars is None:
            active_scalars = tuple(PARAM_NAMES[3:])
        unknown = set(active_scalars) - set(PARAM_NAMES[3:])
        if unknown:
            raise ValueError(f"unknown scalar names: {sorted(unknown)}")
        self.bounds = bounds
        self.base_vector = base.to_vector()
        self.omega_active = bool(omega_active)
        self.active_scalars = tuple(n for n in PARAM_NAMES[3:] if n in set(active_scalars))
        self.scalar_indices = np.array(
            [PARAM_NAMES.index(n) for n in self.active_scalars], dtype=int
        )
        self.scalar_transforms = [
            IntervalTransform(*bounds.interval(n)) for n in self.active_scalars
        ]
        self.dim = (2 if self.omega_active else 0) + len(self.active_scalars)

    # layout: [alr1, alr2 (if omega active), scalars...]
    @property
    def _s0(self) -> int:
        return 2 if self.omega_active else 0

    def to_natural(self, z) -> np.ndarray:
        """z of shape (..., dim) -> full parameter array of shape (..., 18)."""
        z = np.asarray(z, dtype=np.float64)
        out = np.broadcast_to(self.base_vector, z.shape[:-1] + (18,)).copy()
        if self.omega_active:
            out[..., 0:3] = _alr_forward(z[..., 0:2])
        for j, (idx, tr) in enumerate(zip(self.scalar_indices, self.scalar_transforms)):
            out[..., idx] = tr.to_natural(z[..., self._s0 + j])
        return out

    def to_unconstrained(self, theta) -> np.ndarray:
        theta = theta.to_vector() if isinstance(theta, ModelParams) else np.asarray(theta)
        z = np.empty(theta.shape[:-1] + (self.dim,))
        if self.omega_active:
            z[..., 0:2] = _alr_inverse(theta[..., 0:3])
        for j, (idx, tr) in enumerate(zip(self.scalar_indices, self.scalar_transforms)):
            z[..., self._s0 + j] = tr.to_unconstrained(theta[..., idx])
        return z

    def log_jacobian(self, z) -> np.ndarray:
        """log |det d theta / d z| over the active block."""
        z = np.asarray(z, dtype=np.float64)
        total = np.zeros(z.shape[:-1])
        if self.omega_active:
            total = total + _alr_log_jacobian(_alr_forward(z[..., 0:2]))
        for j, tr in enumerate(self.scalar_transforms):
            total = total + tr.log_jacobian(z[..., self._s0 + j])
        return total

    def params(self, z) -> ModelParams:
        return ModelParams.from_vector(self.to_natural(np.asarray(z)))
