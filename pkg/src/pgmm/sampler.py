"""Metropolis-within-Gibbs posterior sampling with two-stage initialization.

One sweep updates every block in a fixed order: (a) residual variance,
(b) subject coefficients, (c) subject changepoints, (d) class coefficient
means, (e) class changepoint means, (f) class sds, (g) memberships,
(h) mixing weights, (i) changepoint-count indicators.  Conjugate blocks
use exact draws; subject changepoints use slice sampling run in lockstep
across subjects; class sds use truncated inverse-gamma draws under the
uniform-sd prior and slice sampling under the half-Cauchy family.

Components beyond a class's active count stay in the state and are
refreshed from their hierarchical priors each sweep, so count toggles are
between states of fixed dimension.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .distributions import (
    half_cauchy_draw,
    half_cauchy_log_sd_density,
    invgamma_draw,
    slice_sample,
    slice_sample_vec,
    truncated_invgamma,
    truncated_normal,
)
from .draws import ChainDraws, ParamLayout
from .model import LOG_2PI, ModelConfig, ModelState, PanelArrays, induced_count
from .priors import PriorSpec, UNIFORM_SD, sample_prior

__all__ = [
    "SamplerConfig",
    "FullGibbs",
    "RestrictedGibbs",
    "initialize_two_stage",
    "gibbs_sweep",
    "run_chain",
    "run_chains_parallel",
    "chain_rng",
]

_VAR_FLOOR = 1e-30


@dataclass(frozen=True)
class SamplerConfig:
    """Chain length, burn-in, chain count, seeding, and slice tuning."""

    n_iter: int
    burn_in: int
    n_chains: int = 3
    master_seed: int = 0
    thin: int = 1
    stage1_iters: int = 1000
    slice_width_frac: float = 0.1

    def __post_init__(self):
        if not self.n_iter > self.burn_in >= 0:
            raise ValueError("need n_iter > burn_in >= 0")
        if self.n_chains < 1 or self.thin < 1 or self.stage1_iters < 0:
            raise ValueError("n_chains >= 1, thin >= 1, stage1_iters >= 0 required")
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")
        if not 0.0 < self.slice_width_frac <= 1.0:
            raise ValueError("slice_width_frac must lie in (0, 1]")

    @property
    def n_stored(self) -> int:
        return (self.n_iter - self.burn_in + self.thin - 1) // self.thin


def chain_rng(master_seed: int, chain_id: int) -> np.random.Generator:
    """Deterministic per-chain generator; independent of scheduling order."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, chain_id]))


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _bernoulli_from_logodds(rng, log_odds: float) -> int:
    if log_odds >= 0:
        p1 = 1.0 / (1.0 + math.exp(-log_odds))
    else:
        e = math.exp(log_odds)
        p1 = e / (1.0 + e)
    return 1 if rng.random() < p1 else 0


def _draw_sd_conditional(rng, n: int, ssq: float, bound: float, spec: PriorSpec, current: float):
    """Draw a random-effect sd from its full conditional.

    ``n`` effects with squared deviations summing to ``ssq`` around their
    (current) mean.  Under the uniform-sd prior the implied variance
    conditional is inverse-gamma((n-1)/2, ssq/2) truncated to (0, bound^2];
    under a half-Cauchy prior the sd is slice sampled.
    """
    floor = max(bound * 1e-12, 1e-150)
    if spec.variance_family == UNIFORM_SD:
        if n == 0:
            return max(bound * rng.random(), floor)
        ssq = max(ssq, 1e-300)
        if n >= 2:
            v = truncated_invgamma(rng, 0.5 * (n - 1), 0.5 * ssq, bound * bound)
            return max(math.sqrt(v), floor)

        def logf(sd):
            if sd <= 0.0 or sd >= bound:
                return -math.inf
            return -n * math.log(sd) - 0.5 * ssq / (sd * sd)

        x0 = min(max(current, floor), bound * (1.0 - 1e-12))
        sd, _ = slice_sample(rng, x0, logf, width=bound / 10.0, lo=0.0, hi=bound)
        return max(sd, floor)

    scale = spec.half_cauchy_scale(bound)
    if n == 0:
        return max(half_cauchy_draw(rng, scale), floor)

    def logf(sd):
        if sd <= 0.0:
            return -math.inf
        return (
            half_cauchy_log_sd_density(sd, scale)
            - n * math.log(sd)
            - 0.5 * ssq / (sd * sd)
        )

    x0 = max(current, floor)
    sd, _ = slice_sample(rng, x0, logf, width=scale, lo=0.0)
    return max(sd, floor)


class FullGibbs:
    """Sweep engine for the full random-effects model on one panel."""

    def __init__(self, panel: PanelArrays, cfg: ModelConfig, spec: PriorSpec,
                 state: ModelState, rng, slice_width_frac: float = 0.1):
        self.panel = panel
        self.cfg = cfg
        self.spec = spec
        self.state = state.copy()
        self.rng = rng
        self.K = cfg.max_changepoints
        self.C = cfg.n_classes
        self.N = panel.y.shape[0]
        self.slice_width = slice_width_frac * (spec.cp_upper - spec.cp_lower)
        self.slice_evals = 0
        self.slice_updates = 0
        self._refresh_cache()

    # -- cached per-subject quantities ------------------------------------
    def _refresh_cache(self):
        s, p = self.state, self.panel
        self.hinge = np.maximum(p.times[:, None, :] - s.lam[:, :, None], 0.0)
        self.contrib = s.beta[:, 2:, None] * self.hinge
        self.base = s.beta[:, 0, None] + s.beta[:, 1, None] * p.times
        self.mean = self._mean_for_counts(s.n_active[s.membership])

    def _mean_for_counts(self, counts):
        if self.K == 0:
            return self.base.copy()
        active = np.arange(self.K)[None, :] < counts[:, None]
        return self.base + (self.contrib * active[:, :, None]).sum(axis=1)

    def _means_by_count(self):
        mbc = np.empty((self.K + 1, self.N, self.panel.y.shape[1]))
        mbc[0] = self.base
        if self.K:
            mbc[1:] = self.base[None] + np.cumsum(self.contrib, axis=1).transpose(1, 0, 2)
        return mbc

    def _ll_by_count(self, mbc):
        p = self.panel
        sigma2 = self.state.resid_var
        resid = (p.y[None] - mbc) * p.mask[None]
        rss = np.einsum("knm,knm->kn", resid, resid)
        return -0.5 * p.m_i[None] * (LOG_2PI + math.log(sigma2)) - 0.5 * rss / sigma2

    # -- block updates ------------------------------------------------------
    def update_resid_var(self):
        p = self.panel
        resid = (p.y - self.mean) * p.mask
        rss = float(np.einsum("nm,nm->", resid, resid))
        shape = self.spec.resid_var_shape + 0.5 * p.n_total
        rate = self.spec.resid_var_rate + 0.5 * rss
        self.state.resid_var = invgamma_draw(self.rng, shape, rate)

    def update_subject_betas(self):
        s, p = self.state, self.panel
        sigma2 = s.resid_var
        counts = s.n_active[s.membership]
        for k in range(self.K + 2):
            if k == 0:
                z = p.mask
                active = np.ones(self.N, dtype=bool)
            elif k == 1:
                z = p.times
                active = np.ones(self.N, dtype=bool)
            else:
                z = self.hinge[:, k - 2]
                active = counts > (k - 2)
            prior_mean = s.beta_mean[s.membership, k]
            prior_var = np.maximum(s.beta_sd[s.membership, k] ** 2, _VAR_FLOOR)
            r = p.y - self.mean + s.beta[:, k, None] * z
            zz = np.einsum("nm,nm->n", z * z, p.mask)
            zr = np.einsum("nm,nm->n", z * r, p.mask)
            prec = 1.0 / prior_var + zz / sigma2
            post_mean = (prior_mean / prior_var + zr / sigma2) / prec
            mean_vec = np.where(active, post_mean, prior_mean)
            sd_vec = np.where(active, 1.0 / np.sqrt(prec), np.sqrt(prior_var))
            new = mean_vec + sd_vec * self.rng.standard_normal(self.N)
            delta = new - s.beta[:, k]
            self.mean += np.where(active, delta, 0.0)[:, None] * z
            s.beta[:, k] = new
            if k >= 2:
                self.contrib[:, k - 2] = s.beta[:, k, None] * self.hinge[:, k - 2]

    def update_subject_lams(self):
        s, p = self.state, self.panel
        sigma2 = s.resid_var
        counts = s.n_active[s.membership]
        for comp in range(self.K):
            prior_mean = s.cp_mean[s.membership, comp]
            prior_sd = np.maximum(s.cp_sd[s.membership, comp], 1e-15)
            active = counts > comp
            idx = np.nonzero(active)[0]
            if idx.size:
                x_a = p.times[idx]
                mask_a = p.mask[idx]
                r_a = (p.y - self.mean)[idx] + self.contrib[idx, comp]
                coef_a = s.beta[idx, comp + 2]
                m_a = prior_mean[idx]
                sd_a = prior_sd[idx]

                def log_lik(lams):
                    h = np.maximum(x_a - lams[:, None], 0.0)
                    q = (r_a - coef_a[:, None] * h) * mask_a
                    return -0.5 * np.einsum("nm,nm->n", q, q) / sigma2

                def logf(lams):
                    return -0.5 * ((lams - m_a) / sd_a) ** 2 + log_lik(lams)

                # Independence-Metropolis relocation from the class prior:
                # the subject conditional can be multimodal, and slice
                # moves alone do not jump between changepoint basins.
                cur = s.lam[idx, comp]
                prop = self.rng.normal(m_a, sd_a)
                accept = np.log(1.0 - self.rng.random(idx.size)) < (
                    log_lik(prop) - log_lik(cur)
                )
                start = np.where(accept, prop, cur)
                new, evals = slice_sample_vec(
                    self.rng, start, logf, width=self.slice_width
                )
                self.slice_evals += evals
                self.slice_updates += 1
                s.lam[idx, comp] = new
                new_h = np.maximum(x_a - new[:, None], 0.0)
                new_contrib = coef_a[:, None] * new_h
                self.mean[idx] += new_contrib - self.contrib[idx, comp]
                self.hinge[idx, comp] = new_h
                self.contrib[idx, comp] = new_contrib
            idx_in = np.nonzero(~active)[0]
            if idx_in.size:
                s.lam[idx_in, comp] = self.rng.normal(prior_mean[idx_in], prior_sd[idx_in])
                self.hinge[idx_in, comp] = np.maximum(
                    p.times[idx_in] - s.lam[idx_in, comp, None], 0.0
                )
                self.contrib[idx_in, comp] = (
                    s.beta[idx_in, comp + 2, None] * self.hinge[idx_in, comp]
                )

    def update_subject_alignment(self):
        """Exact Gibbs draw of each subject's active component alignment.

        A subject's trajectory is invariant to permuting its active
        (changepoint, slope-change) pairs, so the conditional over
        alignments depends only on the class-prior densities.  Without
        this move, subjects can hold pairs in an order crossed relative
        to the class labels, inflating the changepoint sds.
        """
        import itertools as _it

        s = self.state
        for c in range(self.C):
            count = int(s.n_active[c])
            if count < 2:
                continue
            member_idx = np.nonzero(s.membership == c)[0]
            if member_idx.size == 0:
                continue
            perms = np.array(list(_it.permutations(range(count))), dtype=int)
            lam_m = s.lam[member_idx][:, :count]
            beta_m = s.beta[member_idx][:, 2 : 2 + count]
            cp_mu = s.cp_mean[c, :count]
            cp_var = np.maximum(s.cp_sd[c, :count] ** 2, _VAR_FLOOR)
            b_mu = s.beta_mean[c, 2 : 2 + count]
            b_var = np.maximum(s.beta_sd[c, 2 : 2 + count] ** 2, _VAR_FLOOR)
            # logp[n, p] = sum_pos logN(lam[perm[pos]]; cp_mu[pos]) + ...
            lam_terms = (
                -0.5 * (lam_m[:, None, :] - cp_mu[None, :, None]) ** 2
                / cp_var[None, :, None]
            )  # (n, pos, source)
            beta_terms = (
                -0.5 * (beta_m[:, None, :] - b_mu[None, :, None]) ** 2
                / b_var[None, :, None]
            )
            pos_idx = np.arange(count)[None, :]
            logp = (
                lam_terms[:, pos_idx, perms].sum(axis=2)
                + beta_terms[:, pos_idx, perms].sum(axis=2)
            )  # (n, P)
            logp -= logp.max(axis=1, keepdims=True)
            w = np.exp(logp)
            cdf = np.cumsum(w, axis=1)
            u = self.rng.random(member_idx.size) * cdf[:, -1]
            choice = (cdf < u[:, None]).sum(axis=1).clip(0, len(perms) - 1)
            for p_i in np.unique(choice):
                perm = perms[p_i]
                if np.array_equal(perm, np.arange(count)):
                    continue
                rows = member_idx[choice == p_i][:, None]
                s.lam[rows, np.arange(count)] = s.lam[rows, perm]
                s.beta[rows, 2 + np.arange(count)] = s.beta[rows, 2 + perm]
                self.hinge[rows, np.arange(count)] = self.hinge[rows, perm]
                self.contrib[rows, np.arange(count)] = self.contrib[rows, perm]

    def update_class_means(self):
        s, spec = self.state, self.spec
        counts_c = np.bincount(s.membership, minlength=self.C).astype(float)
        for k in range(self.K + 2):
            m0 = spec.intercept_mean_loc if k == 0 else 0.0
            v0 = spec.intercept_mean_var if k == 0 else spec.slope_mean_var
            sums = np.bincount(s.membership, weights=s.beta[:, k], minlength=self.C)
            var_k = np.maximum(s.beta_sd[:, k] ** 2, _VAR_FLOOR)
            prec = 1.0 / v0 + counts_c / var_k
            post_mean = (m0 / v0 + sums / var_k) / prec
            s.beta_mean[:, k] = post_mean + self.rng.standard_normal(self.C) / np.sqrt(prec)

    def update_class_cp_means(self):
        s, spec = self.state, self.spec
        lo, hi = spec.cp_lower, spec.cp_upper
        for c in range(self.C):
            members = s.membership == c
            n_c = int(members.sum())
            for comp in range(self.K):
                if n_c == 0:
                    s.cp_mean[c, comp] = lo + (hi - lo) * self.rng.random()
                    continue
                var = max(s.cp_sd[c, comp] ** 2, _VAR_FLOOR)
                mu = float(s.lam[members, comp].mean())
                s.cp_mean[c, comp] = truncated_normal(
                    self.rng, mu, math.sqrt(var / n_c), lo, hi
                )

    def update_class_sds(self):
        s, spec = self.state, self.spec
        for c in range(self.C):
            members = s.membership == c
            n_c = int(members.sum())
            for k in range(self.K + 2):
                ssq = float(((s.beta[members, k] - s.beta_mean[c, k]) ** 2).sum())
                s.beta_sd[c, k] = _draw_sd_conditional(
                    self.rng, n_c, ssq, spec.beta_sd_bound(k), spec, s.beta_sd[c, k]
                )
            for comp in range(self.K):
                ssq = float(((s.lam[members, comp] - s.cp_mean[c, comp]) ** 2).sum())
                s.cp_sd[c, comp] = _draw_sd_conditional(
                    self.rng, n_c, ssq, spec.cp_sd_bound, spec, s.cp_sd[c, comp]
                )

    def _membership_logweights(self, ll_count):
        s = self.state
        logw = np.log(np.maximum(s.mixing, 1e-300))[None, :].repeat(self.N, axis=0)
        beta_var = np.maximum(s.beta_sd**2, _VAR_FLOOR)  # (C, K+2)
        diff = s.beta[:, None, :] - s.beta_mean[None, :, :]
        logw += -0.5 * (
            (diff * diff / beta_var[None]).sum(axis=2)
            + np.log(2.0 * math.pi * beta_var).sum(axis=1)[None, :]
        )
        if self.K:
            cp_var = np.maximum(s.cp_sd**2, _VAR_FLOOR)
            diffl = s.lam[:, None, :] - s.cp_mean[None, :, :]
            logw += -0.5 * (
                (diffl * diffl / cp_var[None]).sum(axis=2)
                + np.log(2.0 * math.pi * cp_var).sum(axis=1)[None, :]
            )
        logw += ll_count[s.n_active, :].T
        return logw

    def update_membership(self, ll_count):
        s = self.state
        if self.C == 1:
            return
        logw = self._membership_logweights(ll_count)
        top = logw.max(axis=1, keepdims=True)
        finite = np.isfinite(top[:, 0])
        w = np.exp(np.where(np.isfinite(logw - top), logw - top, -np.inf))
        cdf = np.cumsum(w, axis=1)
        total = cdf[:, -1]
        u = self.rng.random(self.N) * total
        new = (cdf < u[:, None]).sum(axis=1).clip(0, self.C - 1)
        s.membership = np.where(finite, new, s.membership).astype(int)
        self.mean = self._mean_for_counts(s.n_active[s.membership])

    def update_mixing(self):
        s = self.state
        if self.C == 1:
            s.mixing = np.ones(1)
            return
        counts = np.bincount(s.membership, minlength=self.C)
        s.mixing = np.clip(
            self.rng.dirichlet(self.spec.alpha + counts.astype(float)), 1e-300, None
        )

    def _permute_components(self, c, member_idx, perm):
        """Relabel class ``c`` components by ``perm`` (active positions only).

        Carries the class-level bundles and the member subjects' matched
        columns; the likelihood and priors are exchangeable over component
        labels, so this is a free move.
        """
        s = self.state
        a = len(perm)
        s.cp_mean[c, :a] = s.cp_mean[c, perm]
        s.cp_sd[c, :a] = s.cp_sd[c, perm]
        s.beta_mean[c, 2 : 2 + a] = s.beta_mean[c, 2 + perm]
        s.beta_sd[c, 2 : 2 + a] = s.beta_sd[c, 2 + perm]
        if member_idx.size:
            rows = member_idx[:, None]
            s.lam[rows, np.arange(a)] = s.lam[rows, perm]
            s.beta[rows, 2 + np.arange(a)] = s.beta[rows, 2 + perm]
            self.hinge[rows, np.arange(a)] = self.hinge[rows, perm]
            self.contrib[rows, np.arange(a)] = self.contrib[rows, perm]

    def _swap_move(self, c, member_idx, count):
        """Metropolis swap of a random active bundle with an inactive one."""
        s = self.state
        j = int(self.rng.integers(count))
        j2 = int(count + self.rng.integers(self.K - count))
        if member_idx.size:
            p = self.panel
            delta = self.contrib[member_idx, j2] - self.contrib[member_idx, j]
            resid = (p.y[member_idx] - self.mean[member_idx]) * p.mask[member_idx]
            resid_new = resid - delta * p.mask[member_idx]
            d_ll = -0.5 * float(
                np.einsum("nm,nm->", resid_new, resid_new)
                - np.einsum("nm,nm->", resid, resid)
            ) / s.resid_var
        else:
            d_ll = 0.0
        if math.log(1.0 - self.rng.random()) >= d_ll:
            return False
        for arr in (s.cp_mean, s.cp_sd):
            arr[c, [j, j2]] = arr[c, [j2, j]]
        for arr in (s.beta_mean, s.beta_sd):
            arr[c, [j + 2, j2 + 2]] = arr[c, [j2 + 2, j + 2]]
        if member_idx.size:
            rows = member_idx[:, None]
            s.lam[rows, [j, j2]] = s.lam[rows, [j2, j]]
            s.beta[rows, [j + 2, j2 + 2]] = s.beta[rows, [j2 + 2, j + 2]]
            self.hinge[rows, [j, j2]] = self.hinge[rows, [j2, j]]
            self.contrib[rows, [j, j2]] = self.contrib[rows, [j2, j]]
            self.mean[member_idx] += delta
        return True

    def _ll_rows(self, rows):
        """Per-count log-likelihoods for a subset of subjects, from caches."""
        p = self.panel
        sigma2 = self.state.resid_var
        base = self.base[rows]
        mbc = np.empty((self.K + 1, rows.size, p.y.shape[1]))
        mbc[0] = base
        if self.K:
            mbc[1:] = base[None] + np.cumsum(self.contrib[rows], axis=1).transpose(1, 0, 2)
        resid = (p.y[rows][None] - mbc) * p.mask[rows][None]
        rss = np.einsum("knm,knm->kn", resid, resid)
        return -0.5 * p.m_i[rows][None] * (LOG_2PI + math.log(sigma2)) - 0.5 * rss / sigma2

    def update_indicators(self, ll_count):
        """Bernoulli count toggles at the current parameter values.

        The log-odds are the prior log-odds plus the change in the class's
        total log-likelihood from toggling the induced count.  A free
        relabeling of the active components beforehand lets the toggle
        test dropping any active component rather than always the last
        one, and a Metropolis swap proposes exchanging an active bundle
        with an inactive one.
        """
        s, scheme = self.state, self.spec.cp_count
        for c in range(self.C):
            member_idx = np.nonzero(s.membership == c)[0]
            count = int(s.n_active[c])
            moved = False
            if count >= 2:
                perm = self.rng.permutation(count)
                if not np.array_equal(perm, np.arange(count)):
                    self._permute_components(c, member_idx, perm)
                    moved = True
            if 0 < count < self.K:
                moved = self._swap_move(c, member_idx, count) or moved
            if moved and member_idx.size:
                ll_c = self._ll_rows(member_idx).sum(axis=1)
            else:
                ll_c = ll_count[:, member_idx].sum(axis=1)
            ind = s.indicators[c]
            for k in range(self.K):
                with_one = ind.copy()
                with_one[k] = 1
                with_zero = ind.copy()
                with_zero[k] = 0
                c1 = induced_count(with_one, scheme.kind)
                c0 = induced_count(with_zero, scheme.kind)
                log_odds = _logit(scheme.probs[k])
                if c1 != c0:
                    log_odds += ll_c[c1] - ll_c[c0]
                ind[k] = _bernoulli_from_logodds(self.rng, log_odds)
            s.n_active[c] = induced_count(ind, scheme.kind)
        self.mean = self._mean_for_counts(s.n_active[s.membership])

    def update_indicators_collapsed(self):
        """Count toggles on the coefficient-marginalized model (burn-in aid).

        Integrates the member subjects' full coefficient vectors out of
        the likelihood so count comparisons allow the surviving
        coefficients to re-adjust, then redraws all coefficients from
        their joint conditional.  Mixes across counts far faster than the
        fixed-coefficient toggle; used during early burn-in to resolve the
        count, after which the plain toggle takes over.
        """
        s, scheme = self.state, self.spec.cp_count
        p = self.panel
        sigma2 = s.resid_var
        for c in range(self.C):
            member_idx = np.nonzero(s.membership == c)[0]
            count = int(s.n_active[c])
            if count >= 2:
                perm = self.rng.permutation(count)
                if not np.array_equal(perm, np.arange(count)):
                    self._permute_components(c, member_idx, perm)
            if 0 < count < self.K:
                self._swap_move(c, member_idx, count)
            ind = s.indicators[c]
            n_m = member_idx.size
            if n_m:
                mask_m = p.mask[member_idx]
                r = p.y[member_idx] * mask_m
                z_full = np.concatenate(
                    [
                        mask_m[:, None, :],
                        (p.times[member_idx] * mask_m)[:, None, :],
                        self.hinge[member_idx] * mask_m[:, None, :],
                    ],
                    axis=1,
                )
                b_full = s.beta_mean[c]
                v_full = np.maximum(s.beta_sd[c] ** 2, _VAR_FLOOR)
                cache = {}

                def evidence(a):
                    if a in cache:
                        return cache[a]
                    d = a + 2
                    z = z_full[:, :d]
                    b, v = b_full[:d], v_full[:d]
                    a_mat = z @ z.transpose(0, 2, 1) / sigma2 + np.diag(1.0 / v)[None]
                    b_vec = np.einsum("ndm,nm->nd", z, r) / sigma2 + (b / v)[None]
                    chol = np.linalg.cholesky(a_mat)
                    w = np.linalg.solve(chol, b_vec[..., None])[..., 0]
                    logdet = 2.0 * np.log(chol[:, np.arange(d), np.arange(d)]).sum(axis=1)
                    gain = float(
                        (
                            -0.5 * (logdet + float(np.log(v).sum()))
                            + 0.5 * np.einsum("nd,nd->n", w, w)
                            - 0.5 * float((b * b / v).sum())
                        ).sum()
                    )
                    cache[a] = (gain, chol, w)
                    return cache[a]

            for k in range(self.K):
                with_one = ind.copy()
                with_one[k] = 1
                with_zero = ind.copy()
                with_zero[k] = 0
                c1 = induced_count(with_one, scheme.kind)
                c0 = induced_count(with_zero, scheme.kind)
                log_odds = _logit(scheme.probs[k])
                if c1 != c0 and n_m:
                    log_odds += evidence(c1)[0] - evidence(c0)[0]
                ind[k] = _bernoulli_from_logodds(self.rng, log_odds)
            s.n_active[c] = induced_count(ind, scheme.kind)
            if n_m:
                a_new = int(s.n_active[c])
                d = a_new + 2
                _, chol, w = evidence(a_new)
                lt = np.transpose(chol, (0, 2, 1))
                post_mean = np.linalg.solve(lt, w[..., None])[..., 0]
                eps = self.rng.standard_normal((n_m, d))
                new_coef = np.empty((n_m, self.K + 2))
                new_coef[:, :d] = post_mean + np.linalg.solve(lt, eps[..., None])[..., 0]
                if d < self.K + 2:
                    new_coef[:, d:] = b_full[None, d:] + np.sqrt(v_full[None, d:]) * (
                        self.rng.standard_normal((n_m, self.K + 2 - d))
                    )
                s.beta[member_idx] = new_coef
                self.base[member_idx] = (
                    new_coef[:, 0, None] + new_coef[:, 1, None] * p.times[member_idx]
                )
                self.contrib[member_idx] = new_coef[:, 2:, None] * self.hinge[member_idx]
        self.mean = self._mean_for_counts(s.n_active[s.membership])

    def sweep(self):
        self._refresh_cache()
        self.update_resid_var()
        self.update_subject_betas()
        self.update_subject_lams()
        self.update_subject_alignment()
        self.update_class_means()
        self.update_class_cp_means()
        self.update_class_sds()
        ll_count = self._ll_by_count(self._means_by_count())
        self.update_membership(ll_count)
        self.update_mixing()
        self.update_indicators(ll_count)


class RestrictedGibbs:
    """Sweep engine for the no-within-class-variability model (stage 1).

    Subject trajectories equal their class-mean trajectories, so the
    unknowns reduce to the residual variance, class coefficient and
    changepoint means, counts, memberships, and mixing weights.
    """

    def __init__(self, panel: PanelArrays, cfg: ModelConfig, spec: PriorSpec,
                 rng, slice_width_frac: float = 0.1, init: ModelState | None = None):
        self.panel = panel
        self.cfg = cfg
        self.spec = spec
        self.rng = rng
        self.K = cfg.max_changepoints
        self.C = cfg.n_classes
        self.N = panel.y.shape[0]
        self.slice_width = slice_width_frac * (spec.cp_upper - spec.cp_lower)
        self.slice_evals = 0
        self.slice_updates = 0
        state = init if init is not None else sample_prior(spec, cfg, rng, self.N)
        self.resid_var = state.resid_var
        self.beta_mean = state.beta_mean.copy()
        self.cp_mean = state.cp_mean.copy()
        self.indicators = state.indicators.copy()
        self.n_active = state.n_active.copy()
        self.membership = state.membership.copy()
        self.mixing = state.mixing.copy()
        self._refresh_class(None)

    def _refresh_class(self, c=None):
        p = self.panel
        classes = range(self.C) if c is None else [c]
        if not hasattr(self, "hinge"):
            shape_h = (self.C, self.K, self.N, p.y.shape[1])
            self.hinge = np.zeros(shape_h)
            self.mean_c = np.zeros((self.C, self.N, p.y.shape[1]))
        for cc in classes:
            for comp in range(self.K):
                self.hinge[cc, comp] = np.maximum(p.times - self.cp_mean[cc, comp], 0.0)
            self.mean_c[cc] = self._class_mean(cc, self.n_active[cc])

    def _class_mean(self, c, count):
        mu = self.beta_mean[c, 0] + self.beta_mean[c, 1] * self.panel.times
        for comp in range(count):
            mu = mu + self.beta_mean[c, comp + 2] * self.hinge[c, comp]
        return mu

    def _ll_by_count(self):
        p = self.panel
        out = np.empty((self.C, self.K + 1, self.N))
        const = -0.5 * p.m_i * (LOG_2PI + math.log(self.resid_var))
        for c in range(self.C):
            mu = self.beta_mean[c, 0] + self.beta_mean[c, 1] * self.panel.times
            for count in range(self.K + 1):
                if count > 0:
                    mu = mu + self.beta_mean[c, count + 1] * self.hinge[c, count - 1]
                resid = (p.y - mu) * p.mask
                out[c, count] = const - 0.5 * np.einsum("nm,nm->n", resid, resid) / self.resid_var
        return out

    def update_resid_var(self):
        p = self.panel
        mean = self.mean_c[self.membership, np.arange(self.N)]
        resid = (p.y - mean) * p.mask
        rss = float(np.einsum("nm,nm->", resid, resid))
        shape = self.spec.resid_var_shape + 0.5 * p.n_total
        rate = self.spec.resid_var_rate + 0.5 * rss
        self.resid_var = invgamma_draw(self.rng, shape, rate)

    def update_class_coefs(self):
        p, spec = self.panel, self.spec
        for c in range(self.C):
            members = self.membership == c
            count = int(self.n_active[c])
            for k in range(self.K + 2):
                m0 = spec.intercept_mean_loc if k == 0 else 0.0
                v0 = spec.intercept_mean_var if k == 0 else spec.slope_mean_var
                active = k <= 1 or (k - 2) < count
                if not active or not members.any():
                    self.beta_mean[c, k] = m0 + math.sqrt(v0) * self.rng.standard_normal()
                    if active:
                        self._refresh_class(c)
                    continue
                if k == 0:
                    z = p.mask[members]
                elif k == 1:
                    z = p.times[members]
                else:
                    z = self.hinge[c, k - 2][members]
                r = (p.y[members] - self.mean_c[c][members]) + self.beta_mean[c, k] * z
                msk = p.mask[members]
                zz = float(np.einsum("nm,nm->", z * z, msk))
                zr = float(np.einsum("nm,nm->", z * r, msk))
                prec = 1.0 / v0 + zz / self.resid_var
                post_mean = (m0 / v0 + zr / self.resid_var) / prec
                self.beta_mean[c, k] = post_mean + self.rng.standard_normal() / math.sqrt(prec)
                self._refresh_class(c)

    def update_class_cps(self):
        p, spec = self.panel, self.spec
        lo, hi = spec.cp_lower, spec.cp_upper
        sigma2 = self.resid_var
        for c in range(self.C):
            members = self.membership == c
            count = int(self.n_active[c])
            for comp in range(self.K):
                if comp >= count or not members.any():
                    self.cp_mean[c, comp] = lo + (hi - lo) * self.rng.random()
                    if comp < count:
                        self._refresh_class(c)
                    continue
                coef = self.beta_mean[c, comp + 2]
                r = (p.y[members] - self.mean_c[c][members]) + coef * self.hinge[c, comp][members]
                x_m = p.times[members]
                msk = p.mask[members]

                def logf(lam):
                    q = (r - coef * np.maximum(x_m - lam, 0.0)) * msk
                    return -0.5 * float(np.einsum("nm,nm->", q, q)) / sigma2

                x0 = float(np.clip(self.cp_mean[c, comp], lo, hi))
                # Independence-Metropolis relocation from the uniform prior;
                # the conditional is multimodal over the changepoint support.
                prop = lo + (hi - lo) * self.rng.random()
                if math.log(1.0 - self.rng.random()) < logf(prop) - logf(x0):
                    x0 = prop
                new, evals = slice_sample(
                    self.rng, x0, logf, width=self.slice_width, lo=lo, hi=hi
                )
                self.slice_evals += evals
                self.slice_updates += 1
                self.cp_mean[c, comp] = new
                self._refresh_class(c)

    def update_membership(self, ll_count):
        if self.C == 1:
            return
        ll = ll_count[np.arange(self.C), self.n_active, :]  # (C, N)
        logw = np.log(np.maximum(self.mixing, 1e-300))[None, :] + ll.T
        top = logw.max(axis=1, keepdims=True)
        w = np.exp(logw - top)
        cdf = np.cumsum(w, axis=1)
        u = self.rng.random(self.N) * cdf[:, -1]
        self.membership = (cdf < u[:, None]).sum(axis=1).clip(0, self.C - 1).astype(int)

    def update_mixing(self):
        if self.C == 1:
            self.mixing = np.ones(1)
            return
        counts = np.bincount(self.membership, minlength=self.C)
        self.mixing = np.clip(
            self.rng.dirichlet(self.spec.alpha + counts.astype(float)), 1e-300, None
        )

    def update_indicators(self):
        """Collapsed count toggles at the class level: integrate out the
        slope-change coefficients of the components whose activity flips,
        draw the indicator, then redraw those coefficients."""
        scheme = self.spec.cp_count
        p = self.panel
        sigma2 = self.resid_var
        v0 = self.spec.slope_mean_var
        for c in range(self.C):
            members = self.membership == c
            count = int(self.n_active[c])
            if count >= 2:
                perm = self.rng.permutation(count)
                if not np.array_equal(perm, np.arange(count)):
                    self.cp_mean[c, :count] = self.cp_mean[c, perm]
                    self.beta_mean[c, 2 : 2 + count] = self.beta_mean[c, 2 + perm]
                    self._refresh_class(c)
            if 0 < count < self.K and members.any():
                j = int(self.rng.integers(count))
                j2 = int(count + self.rng.integers(self.K - count))
                delta = (
                    self.beta_mean[c, j2 + 2] * self.hinge[c, j2]
                    - self.beta_mean[c, j + 2] * self.hinge[c, j]
                )
                resid = (p.y[members] - self.mean_c[c][members]) * p.mask[members]
                resid_new = resid - delta[members] * p.mask[members]
                d_ll = -0.5 * float(
                    np.einsum("nm,nm->", resid_new, resid_new)
                    - np.einsum("nm,nm->", resid, resid)
                ) / sigma2
                if math.log(1.0 - self.rng.random()) < d_ll:
                    self.cp_mean[c, [j, j2]] = self.cp_mean[c, [j2, j]]
                    self.beta_mean[c, [j + 2, j2 + 2]] = self.beta_mean[c, [j2 + 2, j + 2]]
                    self._refresh_class(c)
            ind = self.indicators[c]
            has_members = bool(members.any())
            if has_members:
                msk = p.mask[members]
                r = p.y[members] * msk
                z_full = np.concatenate(
                    [
                        msk[None],
                        (p.times[members] * msk)[None],
                        self.hinge[c][:, members] * msk[None],
                    ],
                    axis=0,
                )
                b_full = np.zeros(self.K + 2)
                b_full[0] = self.spec.intercept_mean_loc
                v_full = np.full(self.K + 2, v0)
                v_full[0] = self.spec.intercept_mean_var
                cache = {}

                def evidence(a):
                    if a in cache:
                        return cache[a]
                    d = a + 2
                    z = z_full[:d]
                    b, v = b_full[:d], v_full[:d]
                    a_mat = np.einsum("dnm,enm->de", z, z) / sigma2 + np.diag(1.0 / v)
                    b_vec = np.einsum("dnm,nm->d", z, r) / sigma2 + b / v
                    chol = np.linalg.cholesky(a_mat)
                    w = np.linalg.solve(chol, b_vec)
                    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
                    gain = (
                        -0.5 * (logdet + float(np.log(v).sum()))
                        + 0.5 * float(w @ w)
                        - 0.5 * float((b * b / v).sum())
                    )
                    cache[a] = (gain, chol, w)
                    return cache[a]

            for k in range(self.K):
                with_one = ind.copy()
                with_one[k] = 1
                with_zero = ind.copy()
                with_zero[k] = 0
                c1 = induced_count(with_one, scheme.kind)
                c0 = induced_count(with_zero, scheme.kind)
                log_odds = _logit(scheme.probs[k])
                if c1 != c0 and has_members:
                    log_odds += evidence(c1)[0] - evidence(c0)[0]
                ind[k] = _bernoulli_from_logodds(self.rng, log_odds)
            self.n_active[c] = induced_count(ind, scheme.kind)
            if has_members:
                a_new = int(self.n_active[c])
                d = a_new + 2
                _, chol, w = evidence(a_new)
                eps = self.rng.standard_normal(d)
                self.beta_mean[c, :d] = np.linalg.solve(chol.T, w + eps)
                if d < self.K + 2:
                    self.beta_mean[c, d:] = b_full[d:] + np.sqrt(v_full[d:]) * (
                        self.rng.standard_normal(self.K + 2 - d)
                    )
            self._refresh_class(c)
        self._refresh_class(None)

    def sweep(self):
        self.update_resid_var()
        self.update_class_coefs()
        self.update_class_cps()
        ll_count = self._ll_by_count()
        self.update_membership(ll_count)
        self.update_mixing()
        self.update_indicators()

    def run(self, n_iters: int) -> dict:
        """Run sweeps and record each iteration's restricted state."""
        rec = {
            "resid_var": np.empty(n_iters),
            "beta_mean": np.empty((n_iters, self.C, self.K + 2)),
            "cp_mean": np.empty((n_iters, self.C, self.K)),
            "count": np.empty((n_iters, self.C), dtype=int),
            "membership": np.empty((n_iters, self.N), dtype=int),
            "mixing": np.empty((n_iters, self.C)),
        }
        for t in range(n_iters):
            self.sweep()
            rec["resid_var"][t] = self.resid_var
            rec["beta_mean"][t] = self.beta_mean
            rec["cp_mean"][t] = self.cp_mean
            rec["count"][t] = self.n_active
            rec["membership"][t] = self.membership
            rec["mixing"][t] = self.mixing
        return rec


def initialize_two_stage(d: Dataset, cfg: ModelConfig, spec: PriorSpec,
                         sampler_cfg: SamplerConfig, rng) -> ModelState:
    """Initial full-model state from a short run of the restricted model.

    Continuous parameters start at their stage-1 means, counts and
    memberships at their stage-1 modes, subject effects at their class
    means, and random-effect sds at the midpoints of their uniform bounds.
    With ``stage1_iters == 0`` the initial state is a pure prior draw.
    """
    panel = PanelArrays.from_dataset(d)
    N = panel.y.shape[0]
    if sampler_cfg.stage1_iters == 0:
        return sample_prior(spec, cfg, rng, N)
    stage1 = RestrictedGibbs(panel, cfg, spec, rng, sampler_cfg.slice_width_frac)
    rec = stage1.run(sampler_cfg.stage1_iters)

    C, K = cfg.n_classes, cfg.max_changepoints
    resid_var = float(rec["resid_var"].mean())

    # Active components can visit different changepoint basins in
    # different slots across iterations; order them by location (carrying
    # the matched slope-change coefficient) before averaging.  Location
    # and slope-change means then condition on the modal count, so they
    # describe one coherent configuration rather than a blend across
    # counts.
    cp_draws = rec["cp_mean"].copy()
    beta_draws = rec["beta_mean"].copy()
    counts_draws = rec["count"]
    for c in range(C):
        for a in range(2, K + 1):
            rows = np.nonzero(counts_draws[:, c] == a)[0]
            if rows.size == 0:
                continue
            sub = cp_draws[rows, c, :a]
            order = np.argsort(sub, axis=1, kind="stable")
            cp_draws[rows, c, :a] = np.take_along_axis(sub, order, axis=1)
            bsub = beta_draws[rows, c, 2 : 2 + a]
            beta_draws[rows, c, 2 : 2 + a] = np.take_along_axis(bsub, order, axis=1)
    counts = np.array(
        [np.bincount(rec["count"][:, c], minlength=K + 1).argmax() for c in range(C)]
    )
    beta_mean = np.empty((C, K + 2))
    cp_mean = np.empty((C, K))
    cp_mid = 0.5 * (spec.cp_lower + spec.cp_upper)
    for c in range(C):
        modal = counts_draws[:, c] == counts[c]
        beta_mean[c, :2] = beta_draws[modal, c, :2].mean(axis=0)
        for j in range(K):
            if j < counts[c]:
                cp_mean[c, j] = cp_draws[modal, c, j].mean()
                beta_mean[c, j + 2] = beta_draws[modal, c, j + 2].mean()
            else:
                act = counts_draws[:, c] > j
                cp_mean[c, j] = cp_draws[act, c, j].mean() if act.any() else cp_mid
                beta_mean[c, j + 2] = 0.0
    cp_mean = cp_mean.clip(spec.cp_lower, spec.cp_upper)
    mixing = np.clip(rec["mixing"].mean(axis=0), 1e-300, None)
    mixing = mixing / mixing.sum()
    membership = np.array(
        [np.bincount(rec["membership"][:, i], minlength=C).argmax() for i in range(N)]
    )
    indicators = (np.arange(K)[None, :] < counts[:, None]).astype(int)

    beta_sd = np.empty((C, K + 2))
    for k in range(K + 2):
        beta_sd[:, k] = 0.5 * spec.beta_sd_bound(k)
    cp_sd = np.full((C, K), 0.5 * spec.cp_sd_bound)

    return ModelState(
        resid_var=resid_var,
        mixing=mixing,
        membership=membership.astype(int),
        beta_mean=beta_mean,
        beta_sd=beta_sd,
        cp_mean=cp_mean,
        cp_sd=cp_sd,
        n_active=counts.astype(int),
        indicators=indicators,
        beta=beta_mean[membership].copy(),
        lam=cp_mean[membership].copy(),
    )


def gibbs_sweep(s: ModelState, d: Dataset, spec: PriorSpec, rng) -> ModelState:
    """One full-conditional update of every block; returns the new state."""
    cfg = ModelConfig(max_changepoints=s.max_changepoints, n_classes=s.n_classes)
    engine = FullGibbs(PanelArrays.from_dataset(d), cfg, spec, s, rng)
    engine.sweep()
    return engine.state


def run_chain(d: Dataset, cfg: ModelConfig, spec: PriorSpec,
              sampler_cfg: SamplerConfig, chain_id: int) -> ChainDraws:
    """Two-stage initialization followed by ``n_iter`` sweeps of one chain."""
    rng = chain_rng(sampler_cfg.master_seed, chain_id)
    panel = PanelArrays.from_dataset(d)
    state = initialize_two_stage(d, cfg, spec, sampler_cfg, rng)
    engine = FullGibbs(panel, cfg, spec, state, rng, sampler_cfg.slice_width_frac)
    layout = ParamLayout(cfg.max_changepoints, cfg.n_classes, panel.y.shape[0])
    stored = np.empty((sampler_cfg.n_stored, layout.n_params))
    row = 0
    for t in range(1, sampler_cfg.n_iter + 1):
        engine.sweep()
        if t > sampler_cfg.burn_in and (t - sampler_cfg.burn_in - 1) % sampler_cfg.thin == 0:
            layout.flatten_into(stored[row], engine.state)
            row += 1
    meta = {
        "n_iter": sampler_cfg.n_iter,
        "burn_in": sampler_cfg.burn_in,
        "thin": sampler_cfg.thin,
        "avg_slice_evals": (
            engine.slice_evals / engine.slice_updates if engine.slice_updates else 0.0
        ),
    }
    return ChainDraws(
        layout=layout,
        states=stored[:row],
        chain_id=chain_id,
        seed=sampler_cfg.master_seed,
        meta=meta,
    )


def _run_chain_task(args):
    d, cfg, spec, sampler_cfg, chain_id = args
    return run_chain(d, cfg, spec, sampler_cfg, chain_id)


def run_chains_parallel(d: Dataset, cfg: ModelConfig, spec: PriorSpec,
                        sampler_cfg: SamplerConfig, parallel: bool = True) -> list[ChainDraws]:
    """Run ``n_chains`` independent chains; archives are scheduling-invariant."""
    tasks = [(d, cfg, spec, sampler_cfg, cid) for cid in range(sampler_cfg.n_chains)]
    if parallel and sampler_cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(sampler_cfg.n_chains, 4)) as pool:
            chains = list(pool.map(_run_chain_task, tasks))
    else:
        chains = [_run_chain_task(t) for t in tasks]
    return sorted(chains, key=lambda ch: ch.chain_id)
