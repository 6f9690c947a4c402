"""Priors over nuisance parameters and SMC marginal-likelihood estimation.

The sampler is an iterated-batch importance sampler over static parameters:
particles drawn from the prior are reweighted step by step with mixture
log densities, resampled systematically when the effective sample size
drops below N/2, and rejuvenated with random-walk Metropolis moves in the
unconstrained reparameterization targeting the partial posterior. The
running normalizer is accumulated entirely in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr, ndtri

from .logodds import logit, sigmoid, to_increments
from .model import (
    ModelParams,
    PARAM_NAMES,
    ParamBounds,
    default_bounds,
    mixture_log_density_stacked,
)
from .transforms import ParamTransform

__all__ = [
    "ScalarPrior",
    "OmegaPrior",
    "PriorSpec",
    "ParticleEnsemble",
    "PosteriorSummary",
    "InferenceError",
    "default_prior_spec",
    "point_mass_at",
    "sample_prior",
    "log_prior_density",
    "systematic_resample",
    "smc_log_marginal",
    "posterior_summary",
    "write_summary_file",
]

N_REJUVENATION_MOVES = 5


class InferenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Scalar prior factors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarPrior:
    """One prior factor on a bounded interval.

    kinds: "halfnormal" (scale), "lognormal" (mu, sigma of log),
    "uniform", "normal" (mu, sigma), "point" (value). Continuous kinds are
    truncated to [lo, hi] and renormalized, so densities integrate to one
    on the stated support.
    """

    kind: str
    lo: float
    hi: float
    mu: float = 0.0
    sigma: float = 1.0
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("halfnormal", "lognormal", "uniform", "normal", "point"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind != "point" and not self.lo < self.hi:
            raise ValueError("prior support must be a nondegenerate interval")
        if self.kind == "point" and not (self.lo <= self.value <= self.hi):
            raise ValueError("point mass must lie inside the bounds")
        clo, chi = self._cdf(self.lo), self._cdf(self.hi)
        object.__setattr__(self, "_cdf_lo", clo)
        object.__setattr__(self, "_cdf_hi", chi)
        object.__setattr__(
            self, "_log_trunc", math.log(chi - clo) if chi > clo else 0.0
        )

    @property
    def is_point(self) -> bool:
        return self.kind == "point"

    def _cdf(self, x: float) -> float:
        if self.kind == "halfnormal":
            return max(0.0, 2.0 * ndtr(x / self.sigma) - 1.0) if x > 0 else 0.0
        if self.kind == "lognormal":
            return float(ndtr((math.log(x) - self.mu) / self.sigma)) if x > 0 else 0.0
        if self.kind == "uniform":
            return min(1.0, max(0.0, (x - self.lo) / (self.hi - self.lo)))
        if self.kind == "normal":
            return float(ndtr((x - self.mu) / self.sigma))
        return 0.0

    def _ppf(self, u):
        if self.kind == "halfnormal":
            return self.sigma * ndtri(0.5 * (1.0 + u))
        if self.kind == "lognormal":
            return np.exp(self.mu + self.sigma * ndtri(u))
        if self.kind == "uniform":
            return self.lo + u * (self.hi - self.lo)
        if self.kind == "normal":
            return self.mu + self.sigma * ndtri(u)
        raise AssertionError

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-CDF draw restricted to [lo, hi]."""
        if self.is_point:
            return np.full(size, self.value) if size is not None else self.value
        u = rng.uniform(self._cdf_lo, self._cdf_hi, size=size)
        return np.clip(self._ppf(u), self.lo, self.hi)

    def _base_logpdf(self, x):
        if self.kind == "halfnormal":
            with np.errstate(invalid="ignore"):
                return 0.5 * math.log(2.0 / math.pi) - math.log(self.sigma) \
                    - 0.5 * (x / self.sigma) ** 2
        if self.kind == "lognormal":
            with np.errstate(divide="ignore", invalid="ignore"):
                lx = np.log(x)
            return -lx - math.log(self.sigma) - 0.5 * math.log(2.0 * math.pi) \
                - 0.5 * ((lx - self.mu) / self.sigma) ** 2
        if self.kind == "uniform":
            return np.zeros_like(x) - math.log(self.hi - self.lo)
        if self.kind == "normal":
            return -math.log(self.sigma) - 0.5 * math.log(2.0 * math.pi) \
                - 0.5 * ((x - self.mu) / self.sigma) ** 2
        raise AssertionError

    def log_density(self, x):
        """Normalized log density on the truncated support; -inf outside.

        Point masses use the convention 0 at the atom and -inf elsewhere.
        """
        x = np.asarray(x, dtype=np.float64)
        if self.is_point:
            out = np.where(x == self.value, 0.0, -np.inf)
            return float(out) if out.ndim == 0 else out
        out = np.where(
            (x >= self.lo) & (x <= self.hi),
            self._base_logpdf(x) - self._log_trunc,
            -np.inf,
        )
        return float(out) if out.ndim == 0 else out

    def dlogpdf(self, x):
        """d/dx of the log density, for interior x (used by VI gradients)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "halfnormal":
            return -x / self.sigma**2
        if self.kind == "lognormal":
            return (-1.0 - (np.log(x) - self.mu) / self.sigma**2) / x
        if self.kind == "uniform":
            return np.zeros_like(x)
        if self.kind == "normal":
            return -(x - self.mu) / self.sigma**2
        raise ValueError("point-mass factors have no density gradient")


@dataclass(frozen=True)
class OmegaPrior:
    """Dirichlet prior on the base weights, or a point mass."""

    alpha: np.ndarray | None = None
    point: np.ndarray | None = None

    def __post_init__(self):
        if (self.alpha is None) == (self.point is None):
            raise ValueError("exactly one of alpha or point must be given")
        if self.alpha is not None:
            a = np.asarray(self.alpha, dtype=np.float64)
            if a.shape != (3,) or np.any(a <= 0):
                raise ValueError("alpha must be three positive concentrations")
            object.__setattr__(self, "alpha", a)
        else:
            p = np.asarray(self.point, dtype=np.float64)
            if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError("point must be a 3-simplex vector")
            object.__setattr__(self, "point", p)

    @property
    def is_point(self) -> bool:
        return self.point is not None

    def sample(self, rng: np.random.Generator, size=None):
        if self.is_point:
            return np.tile(self.point, (size, 1)) if size else self.point.copy()
        return rng.dirichlet(self.alpha, size=size)

    def log_density(self, omega):
        omega = np.asarray(omega, dtype=np.float64)
        if self.is_point:
            same = np.all(omega == self.point, axis=-1)
            return np.where(same, 0.0, -np.inf)
        a = self.alpha
        with np.errstate(divide="ignore"):
            lw = np.log(omega)
        return (
            gammaln(a.sum()) - gammaln(a).sum() + np.sum((a - 1.0) * lw, axis=-1)
        )


@dataclass(frozen=True)
class PriorSpec:
    """Independent factors over all model parameters, truncated to bounds."""

    omega: OmegaPrior
    scalars: dict[str, ScalarPrior]
    bounds: ParamBounds

    def __post_init__(self):
        missing = [n for n in PARAM_NAMES[3:] if n not in self.scalars]
        if missing:
            raise ValueError(f"missing scalar priors: {missing}")
        for name, pr in self.scalars.items():
            lo, hi = self.bounds.interval(name)
            if pr.lo < lo - 1e-12 or pr.hi > hi + 1e-12:
                raise ValueError(f"prior support for {name} exceeds bounds")

    @property
    def active_scalars(self) -> tuple[str, ...]:
        return tuple(n for n in PARAM_NAMES[3:] if not self.scalars[n].is_point)

    def transform(self, base: ModelParams | None = None) -> ParamTransform:
        base = base if base is not None else self.center()
        return ParamTransform(
            self.bounds,
            base,
            active_scalars=self.active_scalars,
            omega_active=not self.omega.is_point,
        )

    def center(self) -> ModelParams:
        """A deterministic in-support parameter point (point-mass values,
        prior medians elsewhere); used as transform base."""
        vals = {}
        for name in PARAM_NAMES[3:]:
            pr = self.scalars[name]
            if pr.is_point:
                vals[name] = pr.value
            else:
                mid = 0.5 * (pr._cdf_lo + pr._cdf_hi)
                vals[name] = float(np.clip(pr._ppf(mid), pr.lo, pr.hi))
        omega = self.omega.point if self.omega.is_point else np.full(3, 1.0 / 3.0)
        vec = np.empty(18)
        vec[0:3] = omega
        for i, name in enumerate(PARAM_NAMES[3:], start=3):
            vec[i] = vals[name]
        return ModelParams.from_vector(vec)


def default_prior_spec(
    bounds: ParamBounds | None = None, nu: str = "point", nu_value: float = 5.0
) -> PriorSpec:
    """Weakly informative prior with full support on the constrained space.

    nu="point" fixes the tail index (the default); nu="uniform" frees it
    over its bounds.
    """
    bounds = bounds or default_bounds()
    scalars: dict[str, ScalarPrior] = {}
    for name in ("mu1", "mu3"):
        lo, hi = bounds.interval(name)
        scalars[name] = ScalarPrior("halfnormal", lo, hi, sigma=1.0)
    for name in ("lambda1", "kappa1", "sigma1", "sigma2", "sigma3"):
        lo, hi = bounds.interval(name)
        scalars[name] = ScalarPrior("lognormal", lo, hi, mu=math.log(0.3), sigma=0.7)
    lo, hi = bounds.interval("tau3")
    scalars["tau3"] = ScalarPrior("uniform", lo, hi)
    lo, hi = bounds.interval("nu")
    if nu == "point":
        scalars["nu"] = ScalarPrior("point", lo, hi, value=nu_value)
    elif nu == "uniform":
        scalars["nu"] = ScalarPrior("uniform", lo, hi)
    else:
        raise ValueError("nu must be 'point' or 'uniform'")
    for k in range(1, 4):
        for j in range(2):
            name = f"gamma{k}{j}"
            lo, hi = bounds.interval(name)
            scalars[name] = ScalarPrior("normal", lo, hi, mu=0.0, sigma=1.0)
    return PriorSpec(
        omega=OmegaPrior(alpha=np.array([2.0, 2.0, 2.0])),
        scalars=scalars,
        bounds=bounds,
    )


def point_mass_at(theta: ModelParams, bounds: ParamBounds | None = None) -> PriorSpec:
    """Degenerate prior concentrated at one parameter point (oracle tests)."""
    bounds = bounds or default_bounds()
    vec = theta.to_vector()
    scalars = {}
    for i, name in enumerate(PARAM_NAMES[3:], start=3):
        lo, hi = bounds.interval(name)
        scalars[name] = ScalarPrior("point", lo, hi, value=float(vec[i]))
    return PriorSpec(
        omega=OmegaPrior(point=theta.omega.copy()), scalars=scalars, bounds=bounds
    )


def sample_prior_stacked(spec: PriorSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """n prior draws as a stacked (n, 18) array."""
    out = np.empty((n, 18))
    out[:, 0:3] = spec.omega.sample(rng, size=n)
    for i, name in enumerate(PARAM_NAMES[3:], start=3):
        out[:, i] = spec.scalars[name].sample(rng, size=n)
    return out


def sample_prior(spec: PriorSpec, rng: np.random.Generator) -> ModelParams:
    """One draw from the prior; always satisfies validate_params."""
    return ModelParams.from_vector(sample_prior_stacked(spec, rng, 1)[0])


def log_prior_density(spec: PriorSpec, theta) -> float | np.ndarray:
    """Log prior density in natural coordinates; -inf outside support."""
    vec = theta.to_vector() if isinstance(theta, ModelParams) else np.asarray(theta)
    total = spec.omega.log_density(vec[..., 0:3])
    for i, name in enumerate(PARAM_NAMES[3:], start=3):
        total = total + spec.scalars[name].log_density(vec[..., i])
    return float(total) if np.ndim(total) == 0 else total


# ---------------------------------------------------------------------------
# Particle machinery
# ---------------------------------------------------------------------------

def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling indices for normalized weights."""
    weights = np.asarray(weights, dtype=np.float64)
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions).clip(0, n - 1)


@dataclass
class ParticleEnsemble:
    """Weighted parameter particles with running normalizer and diagnostics.

    `theta` is the stacked (N, 18) representation; `params_list` converts
    to ModelParams objects on demand.
    """

    theta: np.ndarray
    log_weights: np.ndarray
    log_normalizer: float
    t: int
    resample_count: int = 0
    rejuvenation_acceptance: float = float("nan")
    ess_min: float = float("inf")
    diagnostics: dict | None = None

    @property
    def n_particles(self) -> int:
        return self.theta.shape[0]

    def params_list(self) -> list[ModelParams]:
        return [ModelParams.from_vector(row) for row in self.theta]

    def ess(self) -> float:
        w = np.exp(self.log_weights - logsumexp(self.log_weights))
        return 1.0 / float(np.sum(w * w))


def _prior_log_density_z(spec: PriorSpec, transform: ParamTransform, z: np.ndarray):
    """Prior density of the active block in unconstrained coordinates."""
    theta = transform.to_natural(z)
    return log_prior_density(spec, theta) + transform.log_jacobian(z)


def smc_log_marginal(
    inc,
    v,
    y: int,
    spec: PriorSpec,
    n_particles: int,
    rng: np.random.Generator,
    collect_diagnostics: bool = False,
) -> tuple[float, ParticleEnsemble]:
    """Estimate the log marginal likelihood of the increments under outcome y.

    Returns the log normalizer estimate together with the final ensemble.
    Raises InferenceError (with the offending step index) if the running
    normalizer becomes non-finite.
    """
    dx = np.asarray(getattr(inc, "dx", inc), dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if dx.shape != v.shape:
        raise ValueError("increments and volumes must have equal length")
    n = int(n_particles)
    if n < 2:
        raise ValueError("need at least two particles")

    theta = sample_prior_stacked(spec, rng, n)
    transform = spec.transform()
    d = transform.dim
    z = transform.to_unconstrained(theta) if d else np.zeros((n, 0))
    log_prior_z = _prior_log_density_z(spec, transform, z) if d else np.zeros(n)

    logw = np.full(n, -math.log(n))
    cum_ll = np.zeros(n)
    log_z = 0.0
    resamples = 0
    acc_rates: list[float] = []
    ess_trace = np.empty(len(dx))
    log_z_trace = np.empty(len(dx))
    resample_times: list[int] = []

    for t in range(len(dx)):
        logf = mixture_log_density_stacked(theta, y, dx[t], v[t])
        if np.any(np.isnan(logf)):
            raise InferenceError(f"non-finite likelihood at step {t}")
        cum_ll += logf
        lw = logw + logf
        step = logsumexp(lw)
        if not np.isfinite(step):
            raise InferenceError(f"normalizer collapsed at step {t}")
        log_z += step
        logw = lw - step
        w = np.exp(logw)
        ess = 1.0 / float(np.sum(w * w))
        ess_trace[t] = ess
        log_z_trace[t] = log_z

        if ess < n / 2.0 and d:
            # proposal scale from the weighted spread at the trigger
            mean_z = np.sum(w[:, None] * z, axis=0)
            zc = z - mean_z
            cov = (w[:, None] * zc).T @ zc + 1e-6 * np.eye(d)
            chol = np.linalg.cholesky((2.38**2 / d) * cov)

            idx = systematic_resample(w, rng)
            theta, z = theta[idx], z[idx]
            cum_ll, log_prior_z = cum_ll[idx], log_prior_z[idx]
            logw = np.full(n, -math.log(n))
            resamples += 1
            resample_times.append(t)

            accepted = 0
            for _ in range(N_REJUVENATION_MOVES):
                z_prop = z + rng.standard_normal((n, d)) @ chol.T
                theta_prop = transform.to_natural(z_prop)
                lp_prop = _prior_log_density_z(spec, transform, z_prop)
                ll_prop = np.sum(
                    mixture_log_density_stacked(
                        theta_prop[:, None, :], y, dx[: t + 1], v[: t + 1]
                    ),
                    axis=-1,
                )
                with np.errstate(invalid="ignore"):
                    log_ratio = (lp_prop + ll_prop) - (log_prior_z + cum_ll)
                take = np.log(rng.random(n)) < np.minimum(0.0, log_ratio)
                take &= np.isfinite(log_ratio)
                theta[take], z[take] = theta_prop[take], z_prop[take]
                cum_ll[take], log_prior_z[take] = ll_prop[take], lp_prop[take]
                accepted += int(np.sum(take))
            acc_rates.append(accepted / (n * N_REJUVENATION_MOVES))

    ensemble = ParticleEnsemble(
        theta=theta,
        log_weights=logw,
        log_normalizer=log_z,
        t=len(dx),
        resample_count=resamples,
        rejuvenation_acceptance=float(np.mean(acc_rates)) if acc_rates else float("nan"),
        ess_min=float(np.min(ess_trace)) if len(dx) else float(n),
        diagnostics=(
            {
                "ess_trace": ess_trace,
                "log_normalizer_trace": log_z_trace,
                "resample_times": np.asarray(resample_times, dtype=int),
                "acceptance_rates": np.asarray(acc_rates),
            }
            if collect_diagnostics
            else None
        ),
    )
    return log_z, ensemble


# ---------------------------------------------------------------------------
# Posterior assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorSummary:
    """Outcome posterior built from two per-outcome marginal likelihoods."""

    log_bf: float
    posterior_p1: float
    prior_p1: float
    log_m1: float
    log_m0: float
    ess_min: float
    n_particles: int
    base_seed: int

    def to_dict(self) -> dict[str, float]:
        return {
            "log_bf": self.log_bf,
            "posterior_p1": self.posterior_p1,
            "prior_p1": self.prior_p1,
            "log_m1": self.log_m1,
            "log_m0": self.log_m0,
            "ess_min": self.ess_min,
            "n_particles": self.n_particles,
            "base_seed": self.base_seed,
        }


def _outcome_rng(base_seed: int, y: int) -> np.random.Generator:
    """Independent per-outcome stream derived by hashing (base_seed, y)."""
    return np.random.default_rng(np.random.SeedSequence((int(base_seed), int(y))))


def posterior_summary(
    h,
    spec: PriorSpec,
    prior_p1: float,
    n_particles: int,
    seed,
    collect_diagnostics: bool = False,
):
    """Run the sampler once per outcome and combine into posterior odds.

    `h` is a History (or a precomputed (IncrementPath, volumes) pair);
    `seed` is an integer base seed, or a Generator from which one is drawn.
    Returns the summary, or (summary, diagnostics) when requested.
    """
    if not (0.0 < prior_p1 < 1.0):
        raise ValueError("prior probability must lie strictly inside (0, 1)")
    if isinstance(seed, np.random.Generator):
        base_seed = int(seed.integers(2**63))
    else:
        base_seed = int(seed)
    if isinstance(h, tuple):
        inc, v = h
    else:
        inc, v = to_increments(h), h.v

    results = {}
    diags = {}
    for y in (0, 1):
        log_m, ens = smc_log_marginal(
            inc, v, y, spec, n_particles, _outcome_rng(base_seed, y),
            collect_diagnostics=collect_diagnostics,
        )
        results[y] = (log_m, ens)
        if collect_diagnostics:
            diags[y] = ens.diagnostics
    log_m0, log_m1 = results[0][0], results[1][0]
    log_bf = log_m1 - log_m0
    summary = PosteriorSummary(
        log_bf=log_bf,
        posterior_p1=float(sigmoid(logit(prior_p1) + log_bf)),
        prior_p1=prior_p1,
        log_m1=log_m1,
        log_m0=log_m0,
        ess_min=min(results[0][1].ess_min, results[1][1].ess_min),
        n_particles=int(n_particles),
        base_seed=base_seed,
    )
    if collect_diagnostics:
        return summary, diags
    return summary


def write_summary_file(path, summary: PosteriorSummary) -> None:
    with open(path, "w") as fh:
        for key, value in summary.to_dict().items():
            value = int(value) if isinstance(value, (int, np.integer)) else float(value)
            fh.write(f"{key} = {value!r}\n")
