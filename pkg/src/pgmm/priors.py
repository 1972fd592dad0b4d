"""Default prior system: construction from empirical statistics, log
densities, and prior sampling.

All hyperparameters are resolved numbers derived from the observed data's
baseline mean and overall scales, which makes the priors invariant to
linear rescaling of the time and outcome axes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .data import EmpiricalStats
from .distributions import half_cauchy_draw, half_cauchy_log_sd_density, invgamma_draw
from .model import ModelConfig, ModelState, induced_count

__all__ = [
    "IndicatorScheme",
    "PriorSpec",
    "indicator_probs",
    "cp_count_distribution",
    "half_cauchy_scale_for",
    "build_default_priors",
    "log_prior",
    "sample_prior",
    "UNIFORM_SD",
    "SCALED_HALF_CAUCHY",
    "UNSCALED_HALF_CAUCHY",
]

SEQUENTIAL = "sequential-uniform"
BINOMIAL = "independent-binomial"

UNIFORM_SD = "uniform-sd"
SCALED_HALF_CAUCHY = "scaled-half-cauchy"
# Half-Cauchy(0, 25) for every scale parameter; exposed for the prior
# sensitivity experiments only (it performs poorly and is not a default).
UNSCALED_HALF_CAUCHY = "unscaled-half-cauchy"

_VARIANCE_FAMILIES = (UNIFORM_SD, SCALED_HALF_CAUCHY, UNSCALED_HALF_CAUCHY)


@dataclass(frozen=True)
class IndicatorScheme:
    """Bernoulli success probabilities for the changepoint-count construction."""

    kind: str
    probs: np.ndarray

    def __post_init__(self):
        if self.kind not in (SEQUENTIAL, BINOMIAL):
            raise ValueError(f"unknown indicator scheme kind {self.kind!r}")
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.size and not np.all((probs > 0.0) & (probs < 1.0)):
            raise ValueError("indicator probabilities must lie in (0, 1)")

    @property
    def max_changepoints(self) -> int:
        return len(self.probs)


def indicator_probs(K: int, kind: str, p: float = 0.5) -> IndicatorScheme:
    """Indicator success probabilities for a maximum of ``K`` changepoints.

    The sequential scheme uses P(I_k) = (K-k+1)/(K-k+2) so the induced
    count is uniform over {0, ..., K}; the binomial scheme uses a constant
    probability ``p``.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if kind == SEQUENTIAL:
        probs = np.array([(K - k + 1.0) / (K - k + 2.0) for k in range(1, K + 1)])
    elif kind == BINOMIAL:
        if not 0.0 < p < 1.0:
            raise ValueError("binomial probability must lie in (0, 1)")
        probs = np.full(K, float(p))
    else:
        raise ValueError(f"unknown indicator scheme kind {kind!r}")
    return IndicatorScheme(kind=kind, probs=probs)


def cp_count_distribution(scheme: IndicatorScheme) -> np.ndarray:
    """Exact pmf of the induced changepoint count, by enumeration."""
    K = scheme.max_changepoints
    pmf = np.zeros(K + 1)
    if K == 0:
        pmf[0] = 1.0
        return pmf
    if K > 20:
        raise ValueError("enumeration supports K <= 20")
    for config in itertools.product((0, 1), repeat=K):
        prob = 1.0
        for p, ind in zip(scheme.probs, config):
            prob *= p if ind else (1.0 - p)
        pmf[induced_count(np.array(config), scheme.kind)] += prob
    return pmf


def half_cauchy_scale_for(upper_bound: float) -> float:
    """Half-Cauchy scale whose 90th percentile equals ``upper_bound``.

    Inverts F(x) = (2/pi) arctan(x / scale) at 0.9.
    """
    if upper_bound <= 0.0:
        raise ValueError("upper_bound must be positive")
    return upper_bound / math.tan(0.45 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Fully resolved hyperparameters for every parameter block."""

    resid_var_shape: float
    resid_var_rate: float
    intercept_mean_loc: float
    intercept_mean_var: float
    slope_mean_var: float
    cp_lower: float
    cp_upper: float
    intercept_sd_bound: float
    slope_sd_bound: float
    cp_sd_bound: float
    cp_count: IndicatorScheme
    alpha: float = 1.0
    variance_family: str = UNIFORM_SD

    def __post_init__(self):
        if self.variance_family not in _VARIANCE_FAMILIES:
            raise ValueError(f"unknown variance prior family {self.variance_family!r}")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.cp_lower > self.cp_upper:
            raise ValueError("cp_lower must not exceed cp_upper")

    def beta_sd_bound(self, k: int) -> float:
        """Uniform upper bound for the sd of effect coefficient ``k``."""
        return self.intercept_sd_bound if k == 0 else self.slope_sd_bound

    def half_cauchy_scale(self, bound: float) -> float:
        if self.variance_family == UNSCALED_HALF_CAUCHY:
            return 25.0
        return half_cauchy_scale_for(bound)

    def log_sd_density(self, x: float, bound: float) -> float:
        """Log prior density for a random-effect sd under the active family."""
        if self.variance_family == UNIFORM_SD:
            if 0.0 < x < bound:
                return -math.log(bound)
            return -math.inf
        return half_cauchy_log_sd_density(x, self.half_cauchy_scale(bound))

    def draw_sd(self, rng, bound: float) -> float:
        if self.variance_family == UNIFORM_SD:
            return bound * rng.random()
        return half_cauchy_draw(rng, self.half_cauchy_scale(bound))

    def to_dict(self) -> dict:
        return {
            "resid_var_shape": self.resid_var_shape,
            "resid_var_rate": self.resid_var_rate,
            "intercept_mean_loc": self.intercept_mean_loc,
            "intercept_mean_var": self.intercept_mean_var,
            "slope_mean_var": self.slope_mean_var,
            "cp_lower": self.cp_lower,
            "cp_upper": self.cp_upper,
            "intercept_sd_bound": self.intercept_sd_bound,
            "slope_sd_bound": self.slope_sd_bound,
            "cp_sd_bound": self.cp_sd_bound,
            "cp_count_kind": self.cp_count.kind,
            "cp_count_probs": [float(p) for p in self.cp_count.probs],
            "alpha": self.alpha,
            "variance_family": self.variance_family,
        }


def build_default_priors(
    stats: EmpiricalStats,
    cfg: ModelConfig,
    cp_count_kind: str = SEQUENTIAL,
    cp_count_p: float = 0.5,
    alpha: float = 1.0,
    variance_family: str = UNIFORM_SD,
) -> PriorSpec:
    """Resolve the default prior system from empirical data summaries."""
    for name in ("var_y_first", "slope_scale", "cp_sd_bound"):
        v = getattr(stats, name)
        if not (math.isfinite(v) and v > 0.0):
            raise ValueError(f"cannot build default priors: {name}={v}")
    return PriorSpec(
        resid_var_shape=0.001,
        resid_var_rate=0.001,
        intercept_mean_loc=stats.mean_y_first,
        intercept_mean_var=stats.var_y_first,
        slope_mean_var=stats.slope_scale**2,
        cp_lower=stats.cp_lower,
        cp_upper=stats.cp_upper,
        intercept_sd_bound=stats.sd_y_first,
        slope_sd_bound=stats.slope_scale,
        cp_sd_bound=stats.cp_sd_bound,
        cp_count=indicator_probs(cfg.max_changepoints, cp_count_kind, cp_count_p),
        alpha=alpha,
        variance_family=variance_family,
    )


def _log_normal_pdf(x, mean, var):
    if var <= 0.0:
        return -math.inf
    return -0.5 * (math.log(2.0 * math.pi * var) + (x - mean) ** 2 / var)


def log_prior(s: ModelState, spec: PriorSpec) -> float:
    """Joint log density of all parameter blocks and the subject-level latents.

    Covers the population blocks (residual variance, class means/sds,
    counts, mixing), the membership mass, and the subject random-effect
    densities given their class parameters.  Returns -inf outside the
    support; never raises.
    """
    C = s.n_classes
    K = s.max_changepoints
    total = 0.0

    v = s.resid_var
    if v <= 0.0:
        return -math.inf
    a, b = spec.resid_var_shape, spec.resid_var_rate
    total += a * math.log(b) - gammaln(a) - (a + 1.0) * math.log(v) - b / v

    count_pmf = cp_count_distribution(spec.cp_count)
    width = spec.cp_upper - spec.cp_lower
    for c in range(C):
        total += _log_normal_pdf(
            s.beta_mean[c, 0], spec.intercept_mean_loc, spec.intercept_mean_var
        )
        for k in range(1, K + 2):
            total += _log_normal_pdf(s.beta_mean[c, k], 0.0, spec.slope_mean_var)
        for k in range(K):
            if not spec.cp_lower <= s.cp_mean[c, k] <= spec.cp_upper:
                return -math.inf
            total += -math.log(width)
        for k in range(K + 2):
            total += spec.log_sd_density(s.beta_sd[c, k], spec.beta_sd_bound(k))
        for k in range(K):
            total += spec.log_sd_density(s.cp_sd[c, k], spec.cp_sd_bound)
        p_count = count_pmf[int(s.n_active[c])]
        if p_count <= 0.0:
            return -math.inf
        total += math.log(p_count)
    if not math.isfinite(total):
        return -math.inf

    alpha = spec.alpha
    if np.any(s.mixing <= 0.0):
        return -math.inf
    total += gammaln(C * alpha) - C * gammaln(alpha) + (alpha - 1.0) * float(
        np.sum(np.log(s.mixing))
    )
    total += float(np.sum(np.log(s.mixing[s.membership])))

    for i in range(s.n_subjects):
        c = s.membership[i]
        for k in range(K + 2):
            total += _log_normal_pdf(
                s.beta[i, k], s.beta_mean[c, k], s.beta_sd[c, k] ** 2
            )
        for k in range(K):
            total += _log_normal_pdf(s.lam[i, k], s.cp_mean[c, k], s.cp_sd[c, k] ** 2)
        if not math.isfinite(total):
            return -math.inf
    return float(total)


def sample_prior(spec: PriorSpec, cfg: ModelConfig, rng, n_subjects: int = 1) -> ModelState:
    """Independent draw from every prior block, then subject effects given it."""
    C, K = cfg.n_classes, cfg.max_changepoints
    N = int(n_subjects)
    if spec.cp_count.max_changepoints != K:
        raise ValueError("prior count scheme and model config disagree on K")
    if N < 1:
        raise ValueError("n_subjects must be >= 1")

    resid_var = invgamma_draw(rng, spec.resid_var_shape, spec.resid_var_rate)

    beta_mean = np.empty((C, K + 2))
    beta_mean[:, 0] = rng.normal(
        spec.intercept_mean_loc, math.sqrt(spec.intercept_mean_var), size=C
    )
    beta_mean[:, 1:] = rng.normal(0.0, math.sqrt(spec.slope_mean_var), size=(C, K + 1))
    cp_mean = spec.cp_lower + (spec.cp_upper - spec.cp_lower) * rng.random((C, K))

    beta_sd = np.empty((C, K + 2))
    for k in range(K + 2):
        for c in range(C):
            beta_sd[c, k] = spec.draw_sd(rng, spec.beta_sd_bound(k))
    cp_sd = np.empty((C, K))
    for k in range(K):
        for c in range(C):
            cp_sd[c, k] = spec.draw_sd(rng, spec.cp_sd_bound)

    indicators = (rng.random((C, K)) < spec.cp_count.probs).astype(int)
    n_active = np.array(
        [induced_count(indicators[c], spec.cp_count.kind) for c in range(C)],
        dtype=int,
    )

    mixing = rng.dirichlet(np.full(C, spec.alpha)) if C > 1 else np.ones(1)
    mixing = np.clip(mixing, 1e-300, None)

    u = rng.random(N)
    membership = np.searchsorted(np.cumsum(mixing), u).clip(0, C - 1)

    beta = rng.normal(beta_mean[membership], beta_sd[membership])
    lam = (
        rng.normal(cp_mean[membership], cp_sd[membership])
        if K > 0
        else np.zeros((N, 0))
    )

    return ModelState(
        resid_var=resid_var,
        mixing=mixing,
        membership=membership.astype(int),
        beta_mean=beta_mean,
        beta_sd=beta_sd,
        cp_mean=cp_mean,
        cp_sd=cp_sd,
        n_active=n_active,
        indicators=indicators,
        beta=beta,
        lam=lam,
    )
