"""Model state and likelihood for piecewise-linear growth mixtures.

A subject trajectory has ``n_active + 1`` linear segments: an intercept,
a base slope, and one slope change at each active changepoint.  Slope
changes and changepoints beyond the active count are carried in the state
(at their hierarchical-prior values) but do not enter the likelihood,
which keeps the parameter dimension fixed while the active count varies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ModelConfig",
    "SubjectEffects",
    "ClassParams",
    "ModelState",
    "PanelArrays",
    "positive_part",
    "mean_trajectory",
    "log_likelihood",
    "induced_count",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ModelConfig:
    """Fixed structural hyperparameters: maximum changepoints and classes."""

    max_changepoints: int
    n_classes: int

    def __post_init__(self):
        if self.max_changepoints < 0:
            raise ValueError("max_changepoints must be >= 0")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")


@dataclass(frozen=True)
class SubjectEffects:
    """Subject-level intercept, slope changes (length K+1), changepoints (length K)."""

    intercept: float
    slope_changes: np.ndarray
    changepoints: np.ndarray


@dataclass(frozen=True)
class ClassParams:
    """Class-level means/sds for subject effects plus the active changepoint count."""

    beta_means: np.ndarray  # length K+2
    beta_sds: np.ndarray  # length K+2
    cp_means: np.ndarray  # length K
    cp_sds: np.ndarray  # length K
    n_active: int


def positive_part(x: float) -> float:
    """max(x, 0)."""
    return x if x > 0.0 else 0.0


def induced_count(indicator_row: np.ndarray, kind: str) -> int:
    """Changepoint count induced by a 0/1 indicator vector.

    ``sequential-uniform`` counts leading ones; ``independent-binomial``
    counts all ones.
    """
    ind = np.asarray(indicator_row, dtype=int)
    if kind == "sequential-uniform":
        count = 0
        for v in ind:
            if v == 0:
                break
            count += 1
        return count
    if kind == "independent-binomial":
        return int(ind.sum())
    raise ValueError(f"unknown indicator scheme kind {kind!r}")


def _canonical_order(changepoints: np.ndarray, coefs: np.ndarray) -> np.ndarray:
    # Fixed evaluation order for the active hinge terms so the computed
    # sum is invariant to component relabeling (float addition is not
    # associative).  Sort by changepoint, ties broken by coefficient.
    return np.lexsort((coefs, changepoints))


def mean_trajectory(e: SubjectEffects, n_active: int, x: float) -> float:
    """Piecewise-linear mean at time ``x`` using the first ``n_active`` changepoints."""
    mu = e.intercept + e.slope_changes[0] * x
    if n_active <= 0:
        return mu
    lam = np.asarray(e.changepoints, dtype=float)[:n_active]
    coef = np.asarray(e.slope_changes, dtype=float)[1 : n_active + 1]
    for k in _canonical_order(lam, coef):
        mu += coef[k] * positive_part(x - lam[k])
    return mu


@dataclass
class ModelState:
    """One complete point in parameter space (struct-of-arrays layout).

    Shapes: ``mixing`` (C,), ``membership`` (N,) ints in 0..C-1,
    ``beta_mean``/``beta_sd`` (C, K+2), ``cp_mean``/``cp_sd`` (C, K),
    ``n_active`` (C,), ``indicators`` (C, K), ``beta`` (N, K+2),
    ``lam`` (N, K).
    """

    resid_var: float
    mixing: np.ndarray
    membership: np.ndarray
    beta_mean: np.ndarray
    beta_sd: np.ndarray
    cp_mean: np.ndarray
    cp_sd: np.ndarray
    n_active: np.ndarray
    indicators: np.ndarray
    beta: np.ndarray
    lam: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.mixing)

    @property
    def max_changepoints(self) -> int:
        return self.lam.shape[1]

    @property
    def n_subjects(self) -> int:
        return len(self.membership)

    def subject_effects(self, i: int) -> SubjectEffects:
        return SubjectEffects(
            intercept=float(self.beta[i, 0]),
            slope_changes=self.beta[i, 1:].copy(),
            changepoints=self.lam[i].copy(),
        )

    def class_params(self, c: int) -> ClassParams:
        return ClassParams(
            beta_means=self.beta_mean[c].copy(),
            beta_sds=self.beta_sd[c].copy(),
            cp_means=self.cp_mean[c].copy(),
            cp_sds=self.cp_sd[c].copy(),
            n_active=int(self.n_active[c]),
        )

    def copy(self) -> "ModelState":
        return ModelState(
            resid_var=self.resid_var,
            mixing=self.mixing.copy(),
            membership=self.membership.copy(),
            beta_mean=self.beta_mean.copy(),
            beta_sd=self.beta_sd.copy(),
            cp_mean=self.cp_mean.copy(),
            cp_sd=self.cp_sd.copy(),
            n_active=self.n_active.copy(),
            indicators=self.indicators.copy(),
            beta=self.beta.copy(),
            lam=self.lam.copy(),
        )

    def validate(self, scheme_kind: str | None = None) -> None:
        C, K = self.indicators.shape
        N = self.n_subjects
        assert self.resid_var > 0.0
        assert self.mixing.shape == (C,) and abs(self.mixing.sum() - 1.0) < 1e-8
        assert np.all(self.mixing >= 0.0)
        assert self.membership.shape == (N,)
        assert np.all((self.membership >= 0) & (self.membership < C))
        assert self.beta_mean.shape == (C, K + 2)
        assert self.beta_sd.shape == (C, K + 2) and np.all(self.beta_sd >= 0.0)
        assert self.cp_mean.shape == (C, K)
        assert self.cp_sd.shape == (C, K) and np.all(self.cp_sd >= 0.0)
        assert self.beta.shape == (N, K + 2)
        assert self.lam.shape == (N, K)
        assert np.all((self.n_active >= 0) & (self.n_active <= K))
        for arr in (self.beta_mean, self.beta_sd, self.cp_mean, self.cp_sd, self.beta, self.lam):
            assert np.all(np.isfinite(arr))
        if scheme_kind is not None:
            for c in range(C):
                assert self.n_active[c] == induced_count(self.indicators[c], scheme_kind)


@dataclass(frozen=True)
class PanelArrays:
    """Dataset padded to a rectangular layout for vectorized likelihoods."""

    times: np.ndarray  # (N, Mmax)
    y: np.ndarray  # (N, Mmax)
    mask: np.ndarray  # (N, Mmax) 1.0 where observed
    m_i: np.ndarray  # (N,)
    n_total: int

    @classmethod
    def from_dataset(cls, d) -> "PanelArrays":
        n = d.n_subjects
        m_i = np.array([s.n_obs for s in d.subjects])
        mmax = int(m_i.max())
        times = np.zeros((n, mmax))
        y = np.zeros((n, mmax))
        mask = np.zeros((n, mmax))
        for i, s in enumerate(d.subjects):
            times[i, : s.n_obs] = s.times
            y[i, : s.n_obs] = s.outcomes
            mask[i, : s.n_obs] = 1.0
        return cls(times=times, y=y, mask=mask, m_i=m_i, n_total=int(m_i.sum()))


def log_likelihood(s: ModelState, d) -> float:
    """Gaussian log-likelihood of the panel under the current state.

    Each subject uses the active changepoint count of its own class.
    Hinge terms are summed in a canonical order so the value is exactly
    invariant under class relabeling and changepoint-label permutation.
    """
    if not s.resid_var > 0.0:
        raise ValueError("resid_var must be positive")
    if s.n_subjects != d.n_subjects:
        raise ValueError("state and dataset disagree on the number of subjects")
    sigma2 = float(s.resid_var)
    total = 0.0
    for i, subj in enumerate(d.subjects):
        x = subj.times
        a = int(s.n_active[s.membership[i]])
        mu = s.beta[i, 0] + s.beta[i, 1] * x
        if a > 0:
            lam = s.lam[i, :a]
            coef = s.beta[i, 2 : a + 2]
            for k in _canonical_order(lam, coef):
                mu = mu + coef[k] * np.maximum(x - lam[k], 0.0)
        resid = subj.outcomes - mu
        total += -0.5 * subj.n_obs * (LOG_2PI + np.log(sigma2)) - 0.5 * float(
            resid @ resid
        ) / sigma2
    return float(total)
