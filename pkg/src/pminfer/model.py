"""Three-type latent mixture likelihood for log-odds increments.

Increments conditional on traded volume v and the binary outcome y are a
volume-gated mixture of three behavioral regimes:

  1. informed   N(mu1*(2y-1)*(1-exp(-lambda1*v)), sigma1/sqrt(1+kappa1*v))
  2. noise      N(0, sigma2)
  3. manipulator  location -mu3*(2y-1)*1{v > tau3}, scale sigma3,
                  Student-t base noise with nu degrees of freedom

Gate weights are a softmax over log(omega_k) + gamma_k0 + gamma_k1*log(1+v).
The orientation constraint mu1, mu3 >= 0 pins which outcome each drift
points toward; without it the outcome would not be identifiable.

All density kernels accept a stacked parameter array of shape (..., 18) and
broadcast against the data arguments, so the same code path serves scalar
evaluation, particle ensembles, and sample grids.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

__all__ = [
    "PARAM_NAMES",
    "ModelParams",
    "ParamBounds",
    "BoundViolation",
    "paper_default_params",
    "default_bounds",
    "gate_weights",
    "component_log_density",
    "mixture_log_density",
    "sample_increment",
    "path_log_likelihood",
    "effective_informativeness",
    "validate_params",
    "write_params_file",
    "read_params_file",
]

# Flat serialization order. gamma is row-major over (type k, coefficient j).
PARAM_NAMES = (
    "omega1", "omega2", "omega3",
    "gamma10", "gamma11", "gamma20", "gamma21", "gamma30", "gamma31",
    "mu1", "lambda1", "sigma1", "kappa1", "sigma2", "mu3", "tau3",
    "sigma3", "nu",
)

_I_OMEGA = slice(0, 3)
_I_GAMMA = slice(3, 9)
_MU1, _LAMBDA1, _SIGMA1, _KAPPA1, _SIGMA2, _MU3, _TAU3, _SIGMA3, _NU = range(9, 18)

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full nuisance parameter vector of the three-type mixture."""

    omega: np.ndarray            # (3,) base weights on the simplex
    gamma: np.ndarray            # (3, 2) gating coefficients
    mu1: float                   # informed drift magnitude >= 0
    lambda1: float               # drift saturation rate > 0
    sigma1: float                # informed base scale > 0
    kappa1: float                # informed scale decay >= 0
    sigma2: float                # noise scale > 0
    mu3: float                   # manipulator drift magnitude >= 0
    tau3: float                  # manipulation volume threshold >= 0
    sigma3: float                # manipulator scale > 0
    nu: float                    # Student-t degrees of freedom > 2

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        if self.omega.shape != (3,):
            raise ValueError("omega must have shape (3,)")
        if self.gamma.shape != (3, 2):
            raise ValueError("gamma must have shape (3, 2)")

    def to_vector(self) -> np.ndarray:
        vec = np.empty(18)
        vec[_I_OMEGA] = self.omega
        vec[_I_GAMMA] = self.gamma.ravel()
        vec[9:] = (self.mu1, self.lambda1, self.sigma1, self.kappa1,
                   self.sigma2, self.mu3, self.tau3, self.sigma3, self.nu)
        return vec

    @classmethod
    def from_vector(cls, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (18,):
            raise ValueError("parameter vector must have length 18")
        return cls(
            omega=vec[_I_OMEGA].copy(),
            gamma=vec[_I_GAMMA].reshape(3, 2).copy(),
            mu1=float(vec[_MU1]), lambda1=float(vec[_LAMBDA1]),
            sigma1=float(vec[_SIGMA1]), kappa1=float(vec[_KAPPA1]),
            sigma2=float(vec[_SIGMA2]), mu3=float(vec[_MU3]),
            tau3=float(vec[_TAU3]), sigma3=float(vec[_SIGMA3]),
            nu=float(vec[_NU]),
        )

    def to_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, self.to_vector()))

    @classmethod
    def from_dict(cls, d) -> "ModelParams":
        missing = [k for k in PARAM_NAMES if k not in d]
        if missing:
            raise ValueError(f"missing parameter entries: {missing}")
        return cls.from_vector([float(d[k]) for k in PARAM_NAMES])

    def replace(self, **kw) -> "ModelParams":
        return replace(self, **kw)


def paper_default_params() -> ModelParams:
    """Default synthetic-experiment parameterization."""
    return ModelParams(
        omega=np.array([0.4, 0.4, 0.2]),
        gamma=np.array([[0.0, 0.5], [0.0, 0.0], [0.0, 0.3]]),
        mu1=0.5, lambda1=0.1, sigma1=0.3, kappa1=0.05,
        sigma2=0.5,
        mu3=0.3, tau3=5.0, sigma3=0.4, nu=5.0,
    )


# ---------------------------------------------------------------------------
# Bounds and validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamBounds:
    """Closed intervals for every scalar parameter.

    Scales share [sigma_min, sigma_max]; nu_min must exceed 2 so increment
    moments of order > 2 exist.
    """

    mu1: tuple[float, float] = (0.0, 3.0)
    lambda1: tuple[float, float] = (1e-4, 5.0)
    sigma1: tuple[float, float] = (0.05, 3.0)
    kappa1: tuple[float, float] = (1e-4, 5.0)
    sigma2: tuple[float, float] = (0.05, 3.0)
    mu3: tuple[float, float] = (0.0, 3.0)
    tau3: tuple[float, float] = (0.0, 10.0)
    sigma3: tuple[float, float] = (0.05, 3.0)
    nu: tuple[float, float] = (3.0, 20.0)
    gamma: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        for name in ("mu1", "lambda1", "sigma1", "kappa1", "sigma2",
                     "mu3", "tau3", "sigma3", "nu", "gamma"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"invalid interval for {name}: ({lo}, {hi})")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.nu[0] <= 2:
            raise ValueError("nu lower bound must exceed 2")

    @property
    def sigma_min(self) -> float:
        return min(self.sigma1[0], self.sigma2[0], self.sigma3[0])

    @property
    def sigma_max(self) -> float:
        return max(self.sigma1[1], self.sigma2[1], self.sigma3[1])

    def interval(self, name: str) -> tuple[float, float]:
        """Interval for a flat parameter name (gammaXY share the gamma box)."""
        if name.startswith("gamma"):
            return self.gamma
        return getattr(self, name)

    def scalar_intervals(self) -> dict[str, tuple[float, float]]:
        """Intervals for all 15 non-simplex coordinates, keyed by flat name."""
        return {name: self.interval(name) for name in PARAM_NAMES[3:]}


def default_bounds() -> ParamBounds:
    return ParamBounds()


@dataclass(frozen=True)
class BoundViolation:
    field: str
    value: float
    constraint: str

    def __str__(self):
        return f"{self.field}={self.value!r} violates {self.constraint}"


def validate_params(params: ModelParams, bounds: ParamBounds | None = None) -> list[BoundViolation]:
    """List every violated constraint; an empty list means params are valid.

    Violations are data, not exceptions: the report is consumed by the CLI
    and by rejection logic in samplers.
    """
    bounds = bounds or default_bounds()
    out: list[BoundViolation] = []
    om = params.omega
    if np.any(om < 0):
        out.append(BoundViolation("omega", tuple(om), "all entries >= 0"))
    if abs(float(om.sum()) - 1.0) > 1e-12:
        out.append(BoundViolation("omega", float(om.sum()), "sum to 1 within 1e-12"))
    vec = params.to_vector()
    for idx, name in enumerate(PARAM_NAMES[3:], start=3):
        lo, hi = bounds.interval(name)
        val = float(vec[idx])
        if not np.isfinite(val) or val < lo or val > hi:
            out.append(BoundViolation(name, val, f"in [{lo}, {hi}]"))
    # Orientation is implied by the lower bounds but reported explicitly
    # so a sign error is named as such.
    if params.mu1 < 0:
        out.append(BoundViolation("mu1", params.mu1, "orientation mu1 >= 0"))
    if params.mu3 < 0:
        out.append(BoundViolation("mu3", params.mu3, "orientation mu3 >= 0"))
    return out


# ---------------------------------------------------------------------------
# Stacked density kernels
# ---------------------------------------------------------------------------

def _as_theta(theta) -> np.ndarray:
    if isinstance(theta, ModelParams):
        return theta.to_vector()
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != 18:
        raise ValueError("stacked parameters must have trailing dimension 18")
    return theta


def gate_log_weights_stacked(theta, v) -> np.ndarray:
    """Log softmax gate weights; output shape broadcast(theta batch, v) + (3,)."""
    theta = _as_theta(theta)
    v = np.asarray(v, dtype=np.float64)
    logv1 = np.log1p(v)
    with np.errstate(divide="ignore"):
        log_om = np.log(theta[..., _I_OMEGA])
    logits = [
        log_om[..., k] + theta[..., 3 + 2 * k] + theta[..., 4 + 2 * k] * logv1
        for k in range(3)
    ]
    a = np.stack(np.broadcast_arrays(*logits), axis=-1)
    m = np.max(a, axis=-1, keepdims=True)
    return a - (m + np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True)))


def _locations_scales(theta, y, v):
    """Per-component locations and scales at outcome y and volume v."""
    theta = _as_theta(theta)
    v = np.asarray(v, dtype=np.float64)
    sgn = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    m1 = theta[..., _MU1] * sgn * (-np.expm1(-theta[..., _LAMBDA1] * v))
    s1 = theta[..., _SIGMA1] / np.sqrt(1.0 + theta[..., _KAPPA1] * v)
    m2 = 0.0
    s2 = theta[..., _SIGMA2]
    active = v > theta[..., _TAU3]
    m3 = -theta[..., _MU3] * sgn * active
    s3 = theta[..., _SIGMA3]
    return (m1, m2, m3), (s1, s2, s3)


def _normal_logpdf(x, m, s):
    u = (x - m) / s
    return -np.log(s) - _HALF_LOG_2PI - 0.5 * u * u


def _student_t_logpdf(x, m, s, nu):
    u = (x - m) / s
    return (
        gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu)
        - 0.5 * np.log(nu * np.pi) - np.log(s)
        - 0.5 * (nu + 1.0) * np.log1p(u * u / nu)
    )


def component_log_density_stacked(theta, y, dx, v) -> np.ndarray:
    """Log densities of all three components, stacked along a new last axis."""
    theta = _as_theta(theta)
    dx = np.asarray(dx, dtype=np.float64)
    (m1, m2, m3), (s1, s2, s3) = _locations_scales(theta, y, v)
    l1 = _normal_logpdf(dx, m1, s1)
    l2 = _normal_logpdf(dx, m2, s2)
    l3 = _student_t_logpdf(dx, m3, s3, theta[..., _NU])
    return np.stack(np.broadcast_arrays(l1, l2, l3), axis=-1)


def mixture_log_density_stacked(theta, y, dx, v) -> np.ndarray:
    """Log mixture density log sum_k rho_k(v) f_{k,y}(dx | v)."""
    a = gate_log_weights_stacked(theta, v) + component_log_density_stacked(theta, y, dx, v)
    m = np.max(a, axis=-1)
    with np.errstate(invalid="ignore"):
        out = m + np.log(np.sum(np.exp(a - m[..., None]), axis=-1))
    # all-(-inf) rows (impossible for a valid simplex) would produce nan here
    return out


# ---------------------------------------------------------------------------
# Public scalar-parameter API
# ---------------------------------------------------------------------------

def gate_weights(v, params: ModelParams) -> np.ndarray:
    """Softmax gate weights at volume v; sums to one along the last axis."""
    return np.exp(gate_log_weights_stacked(params, v))


def component_log_density(k: int, y: int, dx, v, params: ModelParams):
    """Log density of component k in {1,2,3} at increment dx."""
    if k not in (1, 2, 3):
        raise ValueError("component index must be 1, 2, or 3")
    out = component_log_density_stacked(params, y, dx, v)[..., k - 1]
    return float(out) if np.ndim(out) == 0 else out


def mixture_log_density(y: int, dx, v, params: ModelParams):
    """Log mixture density of an increment given outcome and volume."""
    out = mixture_log_density_stacked(params, y, dx, v)
    return float(out) if np.ndim(out) == 0 else out


def sample_increment(y: int, v, params: ModelParams, rng: np.random.Generator, size=None):
    """Draw increments ancestrally: a component index from the gate, then
    a location-scale draw from that component.

    `v` may be a scalar (with `size` draws at that volume) or an array of
    per-draw volumes.
    """
    v = np.asarray(v, dtype=np.float64)
    if size is None:
        shape = v.shape if v.ndim else ()
    else:
        shape = (int(size),)
        v = np.broadcast_to(v, shape)
    vv = np.atleast_1d(v)
    gw = np.exp(gate_log_weights_stacked(params, vv))          # (n, 3)
    u = rng.random(vv.shape)
    k = (u[..., None] >= np.cumsum(gw, axis=-1)).sum(axis=-1)  # 0, 1, or 2
    (m1, m2, m3), (s1, s2, s3) = _locations_scales(params, y, vv)
    locs = np.stack(np.broadcast_arrays(m1, np.zeros_like(vv) + m2, m3), axis=-1)
    scales = np.stack(np.broadcast_arrays(s1, np.zeros_like(vv) + s2, s3), axis=-1)
    eps_norm = rng.standard_normal(vv.shape)
    eps_t = rng.standard_t(params.nu, vv.shape)
    eps = np.where(k == 2, eps_t, eps_norm)
    out = np.take_along_axis(locs, k[..., None], axis=-1)[..., 0] + \
        np.take_along_axis(scales, k[..., None], axis=-1)[..., 0] * eps
    if shape == ():
        return float(out[0])
    return out.reshape(shape)


def path_log_likelihood(y: int, dx, v, params: ModelParams) -> float:
    """Sum of per-step mixture log densities (increments are conditionally
    independent given outcome, volumes, and parameters).

    `dx` may be an increment array or an :class:`~pminfer.logodds.IncrementPath`.
    """
    dx = getattr(dx, "dx", dx)
    dx = np.atleast_1d(np.asarray(dx, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if dx.shape != v.shape:
        raise ValueError("increment and volume sequences must have equal length")
    if dx.size == 0:
        return 0.0
    return float(np.sum(mixture_log_density_stacked(params, y, dx, v)))


def effective_informativeness(v, params: ModelParams):
    """Gate-weighted signed drift separation between the two outcomes.

    Positive means informed flow dominates at volume v; negative means
    manipulation dominates; zero means the market is uninformative there.
    """
    v = np.asarray(v, dtype=np.float64)
    gw = np.exp(gate_log_weights_stacked(params, v))
    (m1p, m2p, m3p), _ = _locations_scales(params, 1, v)
    (m1m, m2m, m3m), _ = _locations_scales(params, 0, v)
    sep = np.stack(np.broadcast_arrays(m1p - m1m, m2p - np.asarray(m2m), m3p - m3m), axis=-1)
    out = np.sum(gw * sep, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Flat key-value serialization
# ---------------------------------------------------------------------------

def write_params_file(path, params: ModelParams) -> None:
    with open(path, "w") as fh:
        for name, value in params.to_dict().items():
            fh.write(f"{name} = {float(value)!r}\n")


def read_params_file(path) -> ModelParams:
    values: dict[str, float] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'name = value'")
            name, _, val = line.partition("=")
            values[name.strip()] = float(val)
    return ModelParams.from_dict(values)
