"""Univariate sampling utilities: slice sampling and guarded truncated draws.

The truncated draws use inverse-CDF transforms evaluated through the
stable survival-function branch, with an exponential-proposal rejection
fallback for the far tails where the CDF difference underflows.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaincc, gammainccinv, ndtr, ndtri

__all__ = [
    "slice_sample",
    "slice_sample_vec",
    "truncated_normal",
    "truncated_normal_mean_var",
    "truncated_invgamma",
    "invgamma_draw",
    "half_cauchy_log_sd_density",
    "half_cauchy_draw",
]

_TINY = 1e-300
_MAX_STEP_OUT = 64
_MAX_SHRINK = 200
_MAX_REJECT = 100000


def slice_sample(rng, x0, logf, width, lo=-math.inf, hi=math.inf):
    """One univariate slice-sampling update (stepping out, then shrinkage).

    Returns ``(x1, n_evals)``.  ``logf`` is the unnormalized log target;
    the support may be bounded by ``lo``/``hi`` (logf should return -inf
    outside, the interval is also clipped to these bounds).
    """
    f0 = logf(x0)
    if not np.isfinite(f0):
        raise ValueError("slice_sample started outside the support")
    logy = f0 + math.log(1.0 - rng.random())
    u = rng.random()
    left = max(x0 - width * u, lo)
    right = min(left + width, hi)
    n_evals = 1
    for _ in range(_MAX_STEP_OUT):
        if left <= lo or logf(left) <= logy:
            break
        n_evals += 1
        left = max(left - width, lo)
    for _ in range(_MAX_STEP_OUT):
        if right >= hi or logf(right) <= logy:
            break
        n_evals += 1
        right = min(right + width, hi)
    for _ in range(_MAX_SHRINK):
        x1 = left + (right - left) * rng.random()
        n_evals += 1
        if logf(x1) >= logy:
            return x1, n_evals
        if x1 > x0:
            right = x1
        else:
            left = x1
        if right - left < 1e-14 * (abs(x0) + 1.0):
            break
    return x0, n_evals


def slice_sample_vec(rng, x0, logf, width, lo=-math.inf, hi=math.inf):
    """Lockstep slice sampling for ``n`` independent scalar targets.

    ``logf(x)`` maps an ``(n,)`` position vector to the ``(n,)`` vector of
    per-coordinate log densities (coordinate ``j`` of the output must
    depend only on ``x[j]``).  All coordinates step out and shrink in
    lockstep; finished coordinates idle.  Returns ``(x1, n_evals)`` where
    ``n_evals`` counts vectorized target evaluations.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    if n == 0:
        return x0.copy(), 0
    f0 = logf(x0)
    logy = f0 + np.log(1.0 - rng.random(n))
    u = rng.random(n)
    left = np.maximum(x0 - width * u, lo)
    right = np.minimum(left + width, hi)
    n_evals = 1

    grow = np.ones(n, dtype=bool)
    for _ in range(_MAX_STEP_OUT):
        grow &= left > lo
        if not grow.any():
            break
        vals = logf(left)
        n_evals += 1
        grow &= vals > logy
        left = np.where(grow, np.maximum(left - width, lo), left)
    grow = np.ones(n, dtype=bool)
    for _ in range(_MAX_STEP_OUT):
        grow &= right < hi
        if not grow.any():
            break
        vals = logf(right)
        n_evals += 1
        grow &= vals > logy
        right = np.where(grow, np.minimum(right + width, hi), right)

    x1 = x0.copy()
    todo = np.ones(n, dtype=bool)
    for _ in range(_MAX_SHRINK):
        prop = left + (right - left) * rng.random(n)
        vals = logf(np.where(todo, prop, x1))
        n_evals += 1
        accept = todo & (vals >= logy)
        x1[accept] = prop[accept]
        todo &= ~accept
        if not todo.any():
            break
        shrink_right = todo & (prop > x0)
        shrink_left = todo & ~shrink_right
        right[shrink_right] = prop[shrink_right]
        left[shrink_left] = prop[shrink_left]
        collapsed = todo & (right - left < 1e-14 * (np.abs(x0) + 1.0))
        todo &= ~collapsed
        if not todo.any():
            break
    return x1, n_evals


def _normal_tail_draw(rng, a):
    # Z | Z >= a for a >= 0 (exponential-proposal rejection, Robert 1995).
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    for _ in range(_MAX_REJECT):
        z = a + rng.exponential(1.0 / alpha)
        if math.log(1.0 - rng.random()) <= -0.5 * (z - alpha) ** 2:
            return z
    return a  # unreachable in practice


def truncated_normal(rng, mu, sigma, lo, hi):
    """Draw from N(mu, sigma^2) restricted to [lo, hi]."""
    if not lo < hi:
        raise ValueError("empty truncation interval")
    if sigma <= 0.0:
        return min(max(mu, lo), hi)
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    if a >= 0.0:  # interval entirely in the right tail
        sa, sb = ndtr(-a), ndtr(-b)
        if sa - sb > _TINY and sa > 1e-12:
            u = rng.random()
            z = -ndtri(sa - u * (sa - sb))
        else:
            for _ in range(_MAX_REJECT):
                z = _normal_tail_draw(rng, a)
                if z <= b:
                    break
            else:
                z = a + (b - a) * 1e-3
    elif b <= 0.0:  # entirely in the left tail: mirror
        sa, sb = ndtr(b), ndtr(a)
        if sa - sb > _TINY and sa > 1e-12:
            u = rng.random()
            z = ndtri(sa - u * (sa - sb))
        else:
            for _ in range(_MAX_REJECT):
                z = -_normal_tail_draw(rng, -b)
                if z >= a:
                    break
            else:
                z = b - (b - a) * 1e-3
    else:
        fa, fb = ndtr(a), ndtr(b)
        u = rng.random()
        z = ndtri(fa + u * (fb - fa))
    return float(min(max(mu + sigma * z, lo), hi))


def truncated_normal_mean_var(mu, sigma, lo, hi):
    """Analytic mean and variance of N(mu, sigma^2) truncated to [lo, hi]."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    zden = ndtr(b) - ndtr(a)
    mean = mu + sigma * (phi(a) - phi(b)) / zden
    var = sigma**2 * (
        1.0
        + (a * phi(a) - b * phi(b)) / zden
        - ((phi(a) - phi(b)) / zden) ** 2
    )
    return float(mean), float(var)


def invgamma_draw(rng, shape, rate):
    """Inverse-gamma(shape, rate) draw; density ~ v^-(shape+1) exp(-rate/v)."""
    g = rng.gamma(shape, 1.0 / rate)
    return 1.0 / max(g, _TINY)


def _gamma_tail_draw(rng, shape, rate, t0):
    # T ~ Gamma(shape, rate) conditioned on T >= t0, for t0 deep in the tail.
    lam = rate - (shape - 1.0) / t0 if shape > 1.0 else rate
    lam = max(lam, rate * 1e-12)
    for _ in range(_MAX_REJECT):
        t = t0 + rng.exponential(1.0 / lam)
        log_acc = (shape - 1.0) * math.log(t / t0) - (rate - lam) * (t - t0)
        if math.log(1.0 - rng.random()) <= log_acc:
            return t
    return t0


def truncated_invgamma(rng, shape, rate, upper):
    """Inverse-gamma(shape, rate) draw restricted to (0, upper].

    Uses the inverse CDF through the regularized upper incomplete gamma;
    when the truncation probability underflows the draw falls back to
    rejection in the reciprocal (gamma) scale.
    """
    if shape <= 0.0 or rate <= 0.0 or upper <= 0.0:
        raise ValueError("shape, rate, upper must be positive")
    f_upper = gammaincc(shape, rate / upper)
    if f_upper > _TINY:
        u = rng.random() * f_upper
        if u > _TINY:
            v = rate / gammainccinv(shape, u)
            return float(min(v, upper))
    t = _gamma_tail_draw(rng, shape, rate, rate / upper)
    return float(min(1.0 / t, upper))


def half_cauchy_log_sd_density(x, scale):
    """Log density of the half-Cauchy(scale) distribution at x > 0."""
    if x <= 0.0:
        return -math.inf
    return math.log(2.0 / (math.pi * scale)) - math.log1p((x / scale) ** 2)


def half_cauchy_draw(rng, scale):
    """Half-Cauchy(scale) draw by inverse CDF."""
    return scale * math.tan(0.5 * math.pi * rng.random())
