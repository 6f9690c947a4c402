"""Information-gain metrics, stability bounds, and finite-sample bounds.

Lipschitz and envelope constants are numerical grid suprema over a bounded
increment window, a volume range, and a parameter grid of prior draws plus
box corners. A grid supremum is a lower bound on the true supremum; the
grid specification travels with every constant so downstream containment
checks stay interpretable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .inference import PriorSpec, default_prior_spec, posterior_summary, sample_prior_stacked
from .logodds import History, IncrementPath, logit, to_increments
from .model import (
    ModelParams,
    PARAM_NAMES,
    ParamBounds,
    mixture_log_density_stacked,
    sample_increment,
)
from .simulate import LOGODDS_LIMIT

__all__ = [
    "StabilityReport",
    "FiniteSampleInputs",
    "FiniteSampleBound",
    "GridSpec",
    "realized_ig",
    "expected_ig",
    "lipschitz_constants",
    "lr_envelope",
    "stability_bound",
    "finite_sample_bound",
    "corner_params",
]


# ---------------------------------------------------------------------------
# Information gain
# ---------------------------------------------------------------------------

def _xlogx_ratio(p: float, q: float) -> float:
    """p * log(p/q) with the continuous extension 0 log 0 = 0."""
    if p == 0.0:
        return 0.0
    return p * math.log(p / q)


def realized_ig(post_p1: float, prior_p1: float) -> float:
    """KL divergence of the Bernoulli posterior from the Bernoulli prior.

    The posterior may sit at 0 or 1 (saturated odds); the prior must be
    interior.
    """
    if not (0.0 < prior_p1 < 1.0):
        raise ValueError("prior probability must lie strictly inside (0, 1)")
    if not (0.0 <= post_p1 <= 1.0):
        raise ValueError("posterior probability must lie in [0, 1]")
    return _xlogx_ratio(post_p1, prior_p1) + _xlogx_ratio(1.0 - post_p1, 1.0 - prior_p1)


def expected_ig(
    theta_star: ModelParams,
    v,
    prior_p1: float,
    reps: int,
    spec: PriorSpec,
    n_particles: int,
    base_seed: int,
) -> tuple[float, float]:
    """Monte Carlo conditional mutual information between outcome and
    increments on a fixed volume design.

    Simulates outcomes from the prior, increments from the model on the
    given volumes, runs the posterior, and averages realized information
    gain. Returns (estimate, standard error).
    """
    if reps < 10:
        raise ValueError("need at least 10 replications")
    v = np.asarray(v, dtype=np.float64)
    gains = []
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence((int(base_seed), r)))
        y = int(rng.random() < prior_p1)
        dx = np.atleast_1d(sample_increment(y, v, theta_star, rng))
        summary = posterior_summary(
            (IncrementPath(x0=0.0, dx=dx), v), spec, prior_p1, n_particles,
            seed=int(rng.integers(2**63)),
        )
        gains.append(realized_ig(summary.posterior_p1, prior_p1))
    gains = np.asarray(gains)
    return float(gains.mean()), float(gains.std(ddof=1) / math.sqrt(reps))


# ---------------------------------------------------------------------------
# Parameter grids for numerical suprema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Grid sizes for the numerical suprema, recorded in outputs."""

    n_increment: int = 2001
    n_volume: int = 200
    n_theta: int = 512
    fd_step: float = 1e-5


def corner_params(bounds: ParamBounds, omega_points=None) -> np.ndarray:
    """Structured corner points of the parameter box.

    Full corner enumeration is exponential, so the set combines extreme
    scalar patterns (all-low, all-high, max-drift/min-scale, min-drift/
    max-scale) with simplex vertices, the uniform point, and both gating
    extremes. `omega_points` overrides the simplex sweep (used when the
    weights are pinned by a point-mass prior).
    """
    names = PARAM_NAMES[3:]
    lo = np.array([bounds.interval(n)[0] for n in names])
    hi = np.array([bounds.interval(n)[1] for n in names])
    mid = 0.5 * (lo + hi)
    drift_idx = [names.index(n) for n in ("mu1", "lambda1", "kappa1", "mu3")]
    scale_idx = [names.index(n) for n in ("sigma1", "sigma2", "sigma3")]

    patterns = [lo.copy(), hi.copy()]
    sharp = mid.copy()
    for i in drift_idx:
        sharp[i] = hi[i]
    for i in scale_idx:
        sharp[i] = lo[i]
    patterns.append(sharp)
    flat = mid.copy()
    for i in drift_idx:
        flat[i] = lo[i]
    for i in scale_idx:
        flat[i] = hi[i]
    patterns.append(flat)

    if omega_points is None:
        omegas = [
            np.array([1.0, 0.0, 0.0]),
            np.array([0.0, 1.0, 0.0]),
            np.array([0.0, 0.0, 1.0]),
            np.full(3, 1.0 / 3.0),
        ]
    else:
        omegas = [np.asarray(om, dtype=np.float64) for om in omega_points]
    gamma_idx = [names.index(f"gamma{k}{j}") for k in (1, 2, 3) for j in (0, 1)]
    out = []
    for pat in patterns:
        for om in omegas:
            for gval in (None, bounds.gamma[0], bounds.gamma[1]):
                p = pat.copy()
                if gval is not None:
                    for i in gamma_idx:
                        p[i] = gval
                row = np.concatenate([om, p])
                out.append(row)
    return np.unique(np.asarray(out), axis=0)


def _theta_grid(bounds: ParamBounds, grid: GridSpec, spec: PriorSpec | None, seed: int):
    spec = spec or default_prior_spec(bounds, nu="uniform")
    rng = np.random.default_rng(seed)
    draws = sample_prior_stacked(spec, rng, grid.n_theta)
    omega_points = [spec.omega.point] if spec.omega.is_point else None
    return np.vstack([draws, corner_params(bounds, omega_points=omega_points)])


def _max_abs_fd(theta_rows, y, x_grid, v_grid, axis: str, h: float) -> float:
    """Max |central difference| of the mixture log density along one axis."""
    best = 0.0
    xg = x_grid[:, None]
    vg = v_grid[None, :]
    for row in theta_rows:
        if axis == "x":
            up = mixture_log_density_stacked(row, y, xg + h, vg)
            dn = mixture_log_density_stacked(row, y, xg - h, vg)
        else:
            up = mixture_log_density_stacked(row, y, xg, vg + h)
            dn = mixture_log_density_stacked(row, y, xg, vg - h)
        best = max(best, float(np.max(np.abs(up - dn))) / (2 * h))
    return best


def lipschitz_constants(
    bounds: ParamBounds,
    radius: float,
    v_range: tuple[float, float],
    grid: GridSpec | None = None,
    spec: PriorSpec | None = None,
    seed: int = 0,
) -> tuple[float, float, GridSpec]:
    """Numerical increment- and volume-sensitivity constants at a radius.

    Central differences of the log mixture density, maximized over both
    outcomes, an increment grid on [-radius, radius], a volume grid, and
    the parameter grid. Returns (lx, lv, grid_spec).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    grid = grid or GridSpec()
    h = grid.fd_step
    x_grid = np.linspace(-radius, radius, grid.n_increment)
    v_lo, v_hi = v_range
    if v_lo < 0 or v_hi <= v_lo:
        raise ValueError("invalid volume range")
    # keep central differences inside the admissible volume range
    v_grid = np.linspace(v_lo + h, max(v_hi - h, v_lo + 2 * h), grid.n_volume)
    thetas = _theta_grid(bounds, grid, spec, seed)
    lx = max(_max_abs_fd(thetas, y, x_grid, v_grid, "x", h) for y in (0, 1))
    lv = max(_max_abs_fd(thetas, y, x_grid, v_grid, "v", h) for y in (0, 1))
    return lx, lv, grid


def lr_envelope(
    bounds: ParamBounds,
    theta_star: ModelParams,
    y_star: int,
    v,
    radius: float,
    grid: GridSpec | None = None,
    spec: PriorSpec | None = None,
    seed: int = 0,
) -> float:
    """Numerical bound on per-step log-likelihood-ratio magnitude.

    Supremum over the parameter grid, design volumes, and increments in
    [-radius, radius] of |log f_true - log f_alt|.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    grid = grid or GridSpec()
    v = np.asarray(v, dtype=np.float64)
    x_grid = np.linspace(-radius, radius, grid.n_increment)
    ref = mixture_log_density_stacked(
        theta_star, y_star, x_grid[:, None], v[None, :]
    )
    thetas = _theta_grid(bounds, grid, spec, seed)
    best = 0.0
    for row in thetas:
        alt = mixture_log_density_stacked(row, 1 - y_star, x_grid[:, None], v[None, :])
        best = max(best, float(np.max(np.abs(ref - alt))))
    return best


# ---------------------------------------------------------------------------
# Stability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    """One perturbation trial compared against the odds-stability bound."""

    lx: float
    lv: float
    radius: float
    sum_abs_dx_diff: float
    sum_abs_v_diff: float
    bf_bound: float
    posterior_bound: float
    observed_bf_diff: float
    on_event: bool


def stability_bound(
    h: History,
    h_pert: History,
    radius: float,
    lx: float,
    lv: float,
    observed_bf_diff: float = float("nan"),
) -> StabilityReport:
    """Evaluate the posterior-odds perturbation bound for two histories.

    The bound only certifies trials where both increment paths stay inside
    [-radius, radius] (flagged by on_event). The posterior-probability
    bound divides by four and may exceed one, in which case it is vacuous
    but still reported.
    """
    if h.horizon != h_pert.horizon:
        raise ValueError("histories must share a horizon")
    dx = to_increments(h).dx
    dxp = to_increments(h_pert).dx
    sum_dx = float(np.sum(np.abs(dx - dxp)))
    sum_v = float(np.sum(np.abs(h.v - h_pert.v)))
    bound = 2.0 * (lx * sum_dx + lv * sum_v)
    on_event = bool(
        np.max(np.abs(dx)) <= radius and np.max(np.abs(dxp)) <= radius
    )
    return StabilityReport(
        lx=lx,
        lv=lv,
        radius=radius,
        sum_abs_dx_diff=sum_dx,
        sum_abs_v_diff=sum_v,
        bf_bound=bound,
        posterior_bound=bound / 4.0,
        observed_bf_diff=float(observed_bf_diff),
        on_event=on_event,
    )


# ---------------------------------------------------------------------------
# Finite-sample error bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiniteSampleInputs:
    """Ingredients of the truncation-based posterior error bound."""

    delta_t: float          # per-period separation gap, nats
    epsilon: float          # slack, 0 < epsilon < delta_t
    radius: float           # truncation radius for increments
    envelope: float         # log-likelihood-ratio bound on the event
    horizon: int
    moment_constant: float  # bound on E|dx|^q
    moment_order: float     # q > 2

    def __post_init__(self):
        if not (0.0 < self.epsilon < self.delta_t):
            raise ValueError("epsilon must lie strictly between 0 and delta_t")
        if self.moment_order <= 2:
            raise ValueError("moment order must exceed 2")
        if min(self.radius, self.envelope, self.moment_constant) <= 0 or self.horizon < 1:
            raise ValueError("radius, envelope, moment constant, horizon must be positive")


@dataclass(frozen=True)
class FiniteSampleBound:
    tail_term: float            # exp(-T eps^2 / (2 B^2))
    event_term: float           # T C_q R^{-q}
    prob_bound: float           # their sum
    expected_error_bound: float # adds exp(-T (delta - eps))


def finite_sample_bound(inp: FiniteSampleInputs) -> FiniteSampleBound:
    """Evaluate the truncation-based posterior error bound terms."""
    tail = math.exp(-inp.horizon * inp.epsilon**2 / (2.0 * inp.envelope**2))
    event = inp.horizon * inp.moment_constant * inp.radius ** (-inp.moment_order)
    prob = tail + event
    expected = math.exp(-inp.horizon * (inp.delta_t - inp.epsilon)) + prob
    return FiniteSampleBound(
        tail_term=tail, event_term=event, prob_bound=prob,
        expected_error_bound=expected,
    )


def estimate_moment_constant(
    theta_star: ModelParams,
    v_design,
    order: float,
    n_samples: int = 1_000_000,
    seed: int = 0,
    safety: float = 2.0,
) -> float:
    """Empirical q-th absolute moment of increments with a safety factor."""
    rng = np.random.default_rng(seed)
    v = rng.choice(np.asarray(v_design, dtype=np.float64), size=n_samples)
    y = rng.integers(0, 2, size=n_samples)
    dx = np.empty(n_samples)
    for yy in (0, 1):
        mask = y == yy
        dx[mask] = sample_increment(int(yy), v[mask], theta_star, rng)
    return float(safety * np.mean(np.abs(dx) ** order))
