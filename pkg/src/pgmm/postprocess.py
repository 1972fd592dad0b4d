"""Post-hoc repair and summarization of draw archives.

Order of operations for a fitted model: reorder changepoint labels within
each class, repair class label switching against a pivot allocation, then
pool chains for summaries and convergence diagnostics.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from .data import Dataset
from .draws import ChainDraws
from .model import LOG_2PI, PanelArrays

__all__ = [
    "DiagnosticError",
    "PosteriorSummary",
    "order_changepoint_labels",
    "relabel_classes_ecr",
    "psrf",
    "multivariate_psrf",
    "summarize",
    "dic",
    "pooled_log_likelihoods",
    "format_summary_text",
]

PSRF_THRESHOLD = 1.2


class DiagnosticError(ValueError):
    """A convergence diagnostic is undefined for the given chains."""


# ---------------------------------------------------------------------------
# label repair
# ---------------------------------------------------------------------------

def order_changepoint_labels(draws: ChainDraws) -> ChainDraws:
    """Sort each iteration's active changepoint components by location.

    The permutation carries the component's sd, the matched slope-change
    coefficient (class mean and sd), and the member subjects' changepoints
    and slope changes; inactive components keep their original order after
    the active block.  Subject trajectories are unchanged.
    """
    out = draws.copy()
    layout = out.layout
    K, C, N = layout.max_changepoints, layout.n_classes, layout.n_subjects
    if K < 2:
        return out
    states = out.states
    counts = layout.view(states, "count").astype(int)
    psi = layout.view(states, "psi").astype(int)

    def block_cols(name, c, comp_lo, width, per_class):
        start = layout.block(name).start + c * per_class
        return np.arange(start + comp_lo, start + comp_lo + width)

    for c in range(C):
        for a in range(2, K + 1):
            rows = np.nonzero(counts[:, c] == a)[0]
            if rows.size == 0:
                continue
            lam_cols = block_cols("lambda_mean", c, 0, a, K)
            order = np.argsort(states[np.ix_(rows, lam_cols)], axis=1, kind="stable")
            if np.array_equal(order, np.broadcast_to(np.arange(a), order.shape)):
                continue
            col_groups = [
                lam_cols,
                block_cols("sigma_lambda", c, 0, a, K),
                block_cols("beta_mean", c, 2, a, K + 2),
                block_cols("sigma_beta", c, 2, a, K + 2),
            ]
            for cols in col_groups:
                sub = states[np.ix_(rows, cols)]
                states[np.ix_(rows, cols)] = np.take_along_axis(sub, order, axis=1)
            for i in range(N):
                in_class = psi[rows, i] == c + 1
                if not in_class.any():
                    continue
                r_i = rows[in_class]
                o_i = order[in_class]
                for name, lo, per in (("lam", 0, K), ("beta", 2, K + 2)):
                    start = layout.block(name).start + i * per
                    cols = np.arange(start + lo, start + lo + a)
                    sub = states[np.ix_(r_i, cols)]
                    states[np.ix_(r_i, cols)] = np.take_along_axis(sub, o_i, axis=1)
    return out


def _class_column_permutation(layout, perm):
    """Global column permutation implementing old-class -> new-class ``perm``."""
    colperm = np.arange(layout.n_params)
    K, C = layout.max_changepoints, layout.n_classes
    widths = {
        "beta_mean": K + 2,
        "lambda_mean": K,
        "sigma_beta": K + 2,
        "sigma_lambda": K,
        "count": 1,
        "nu": 1,
        "indicators": K,
    }
    inv = np.empty(C, dtype=int)
    inv[list(perm)] = np.arange(C)
    for name, w in widths.items():
        start = layout.block(name).start
        for c_new in range(C):
            src = start + inv[c_new] * w
            dst = start + c_new * w
            colperm[dst : dst + w] = np.arange(src, src + w)
    return colperm


def relabel_classes_ecr(chains: list[ChainDraws], max_passes: int = 30) -> list[ChainDraws]:
    """Repair class label switching with per-iteration pivot matching.

    Each iteration's class labels are permuted to best agree with a pivot
    allocation; the pivot starts as the per-subject modal label over all
    pooled iterations and the pass repeats until it is stable.  Exhaustive
    search over the C! permutations (supported for C <= 8).
    """
    layout = chains[0].layout
    C, N = layout.n_classes, layout.n_subjects
    if C == 1:
        return [ch.copy() for ch in chains]
    if C > 8:
        raise ValueError("ECR relabeling supports at most 8 classes")
    out = [ch.copy() for ch in chains]
    perms = np.array(list(itertools.permutations(range(C))), dtype=int)
    psi_sl = layout.block("psi")

    def pooled_psi():
        return np.vstack([layout.view(ch.states, "psi").astype(int) for ch in out])

    def modal_pivot(psi_all):
        pivot = np.empty(N, dtype=int)
        for i in range(N):
            pivot[i] = np.bincount(psi_all[:, i] - 1, minlength=C).argmax()
        return pivot

    pivot = modal_pivot(pooled_psi())
    colperms = {tuple(p): _class_column_permutation(layout, p) for p in perms}
    for _ in range(max_passes):
        changed_any = False
        for ch in out:
            psi = layout.view(ch.states, "psi").astype(int) - 1  # (T, N)
            T = psi.shape[0]
            code = psi * C + pivot[None, :]
            offsets = (np.arange(T) * C * C)[:, None]
            agree = np.bincount(
                (code + offsets).ravel(), minlength=T * C * C
            ).reshape(T, C, C)
            scores = agree[:, np.arange(C)[None, :], perms].sum(axis=2)  # (T, P)
            best = scores.argmax(axis=1)
            for p_idx in np.unique(best):
                perm = perms[p_idx]
                if np.array_equal(perm, np.arange(C)):
                    continue
                rows = np.nonzero(best == p_idx)[0]
                ch.states[rows] = ch.states[np.ix_(rows, colperms[tuple(perm)])]
                ch.states[np.ix_(rows, np.arange(psi_sl.start, psi_sl.stop))] = (
                    perm[psi[rows]] + 1
                )
                changed_any = True
        new_pivot = modal_pivot(pooled_psi())
        if np.array_equal(new_pivot, pivot) and not changed_any:
            break
        if np.array_equal(new_pivot, pivot):
            break
        pivot = new_pivot
    return out


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------

def psrf(series) -> float:
    """Potential scale reduction factor over >= 2 equal-length chains.

    sqrt(((n-1)/n * W + B/n) / W) with W the mean within-chain variance and
    B/n the between-chain variance of the chain means.
    """
    arrs = [np.asarray(s, dtype=float) for s in series]
    if len(arrs) < 2:
        raise DiagnosticError("psrf needs at least 2 chains")
    n = len(arrs[0])
    if n < 2 or any(len(a) != n for a in arrs):
        raise DiagnosticError("psrf needs equal chain lengths >= 2")
    w = float(np.mean([np.var(a, ddof=1) for a in arrs]))
    if w == 0.0:
        raise DiagnosticError("within-chain variance is zero")
    b_over_n = float(np.var([a.mean() for a in arrs], ddof=1))
    return math.sqrt(((n - 1) / n * w + b_over_n) / w)


def multivariate_psrf(series) -> float:
    """Multivariate PSRF: sqrt((n-1)/n + (m+1)/m * lambda_1).

    ``lambda_1`` is the largest eigenvalue of W^{-1} B/n for within/between
    covariance matrices; a small ridge stabilizes near-singular W.
    """
    mats = [np.atleast_2d(np.asarray(s, dtype=float)) for s in series]
    mats = [m if m.shape[0] > 1 else m.T for m in mats]
    m = len(mats)
    if m < 2:
        raise DiagnosticError("multivariate_psrf needs at least 2 chains")
    n, dim = mats[0].shape
    if n < 2 or any(mat.shape != (n, dim) for mat in mats):
        raise DiagnosticError("multivariate_psrf needs equal chain shapes, n >= 2")
    w = np.mean([np.cov(mat, rowvar=False, ddof=1) for mat in mats], axis=0)
    w = np.atleast_2d(w)
    means = np.array([mat.mean(axis=0) for mat in mats])
    b_over_n = np.atleast_2d(np.cov(means, rowvar=False, ddof=1))
    ridge = 1e-10 * np.trace(w) / dim if np.trace(w) > 0 else 1e-10
    w_r = w + ridge * np.eye(dim)
    lam = eigh(b_over_n, w_r, eigvals_only=True)
    lam1 = max(float(lam[-1]), 0.0)
    return math.sqrt((n - 1) / n + (m + 1) / m * lam1)


def _diagnostic_tables(chains, threshold):
    layout = chains[0].layout
    cols = layout.class_level_columns()
    names = [layout.names[j] for j in cols]
    per_chain = [ch.states[:, cols] for ch in chains]
    table = {}
    if len(chains) >= 2:
        keep = []
        for j, name in enumerate(names):
            series = [pc[:, j] for pc in per_chain]
            pooled_var = np.var(np.concatenate(series))
            if pooled_var == 0.0:
                continue
            try:
                table[name] = psrf(series)
            except DiagnosticError:
                continue
            keep.append(j)
        mpsrf = (
            multivariate_psrf([pc[:, keep] for pc in per_chain]) if keep else float("nan")
        )
    else:
        mpsrf = float("nan")
    mean_psrf = float(np.mean(list(table.values()))) if table else float("nan")
    converged = bool(table) and mean_psrf < threshold
    return table, mpsrf, mean_psrf, converged


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSummary:
    """Point estimates, intervals, and diagnostics for one fitted model."""

    params: dict  # name -> {"mean", "ci_lower", "ci_upper"}
    count_posterior: np.ndarray  # (C, K+1)
    membership_probs: np.ndarray  # (N, C)
    correlations: np.ndarray  # (C, 2K+2, 2K+2), nan where undefined
    effect_names: list
    subject_ids: list
    dic: float
    psrf: dict
    mpsrf: float
    mean_psrf: float
    converged: bool
    n_chains: int
    n_draws: int
    time_shift: float = 0.0
    max_changepoints: int = 0
    n_classes: int = 1

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            return x

        return {
            "params": {
                k: {kk: clean(float(vv)) for kk, vv in v.items()}
                for k, v in self.params.items()
            },
            "count_posterior": [
                {f"K={k}": float(p) for k, p in enumerate(row)}
                for row in self.count_posterior
            ],
            "membership_probs": {
                sid: [float(p) for p in row]
                for sid, row in zip(self.subject_ids, self.membership_probs)
            },
            "correlations": [
                [[clean(float(v)) for v in r] for r in mat] for mat in self.correlations
            ],
            "effect_names": list(self.effect_names),
            "dic": clean(float(self.dic)),
            "psrf": {k: clean(float(v)) for k, v in self.psrf.items()},
            "mpsrf": clean(float(self.mpsrf)),
            "mean_psrf": clean(float(self.mean_psrf)),
            "converged": bool(self.converged),
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
            "time_shift": float(self.time_shift),
            "max_changepoints": self.max_changepoints,
            "n_classes": self.n_classes,
        }


def pooled_log_likelihoods(states: np.ndarray, layout, panel: PanelArrays) -> np.ndarray:
    """Log-likelihood of every stored draw, vectorized per subject."""
    T = states.shape[0]
    K = layout.max_changepoints
    sigma2 = layout.view(states, "sigma_eps") ** 2  # (T,)
    beta = layout.view(states, "beta")  # (T, N, K+2)
    lam = layout.view(states, "lam")  # (T, N, K)
    psi = layout.view(states, "psi").astype(int) - 1  # (T, N)
    counts = layout.view(states, "count").astype(int)  # (T, C)
    ll = np.zeros(T)
    t_idx = np.arange(T)
    for i in range(int(panel.y.shape[0])):
        m_i = int(panel.m_i[i])
        x = panel.times[i, :m_i]
        y = panel.y[i, :m_i]
        base = beta[:, i, 0, None] + beta[:, i, 1, None] * x[None, :]
        if K:
            hinge = np.maximum(x[None, None, :] - lam[:, i, :, None], 0.0)
            contrib = beta[:, i, 2:, None] * hinge
            cum = np.concatenate(
                [np.zeros((T, 1, m_i)), np.cumsum(contrib, axis=1)], axis=1
            )
            count_i = counts[t_idx, psi[:, i]]
            mu = base + cum[t_idx, count_i]
        else:
            mu = base
        resid = y[None, :] - mu
        rss = np.einsum("tm,tm->t", resid, resid)
        ll += -0.5 * m_i * (LOG_2PI + np.log(sigma2)) - 0.5 * rss / sigma2
    return ll


def dic(draws, d: Dataset) -> float:
    """Deviance information criterion from pooled draws.

    DIC = mean deviance + p_D, p_D = mean deviance - deviance at the
    plug-in state (posterior means for continuous parameters, modes for
    the discrete counts and memberships).
    """
    chains = draws if isinstance(draws, (list, tuple)) else [draws]
    layout = chains[0].layout
    states = np.vstack([ch.states for ch in chains])
    if states.shape[0] == 0:
        raise ValueError("empty draw archive")
    panel = PanelArrays.from_dataset(d)
    dev = -2.0 * pooled_log_likelihoods(states, layout, panel)
    mean_dev = float(dev.mean())

    plug = states.mean(axis=0).copy()
    C, K, N = layout.n_classes, layout.max_changepoints, layout.n_subjects
    counts = layout.view(states, "count").astype(int)
    psi = layout.view(states, "psi").astype(int)
    modal_counts = np.array(
        [np.bincount(counts[:, c], minlength=K + 1).argmax() for c in range(C)]
    )
    modal_psi = np.array(
        [np.bincount(psi[:, i] - 1, minlength=C).argmax() + 1 for i in range(N)]
    )
    plug[layout.block("count")] = modal_counts
    plug[layout.block("psi")] = modal_psi
    plug[layout.block("indicators")] = (
        np.arange(K)[None, :] < modal_counts[:, None]
    ).astype(float).ravel()
    nu = plug[layout.block("nu")]
    plug[layout.block("nu")] = nu / nu.sum()
    dev_plug = float(-2.0 * pooled_log_likelihoods(plug[None, :], layout, panel)[0])
    p_d = mean_dev - dev_plug
    return mean_dev + p_d


def summarize(draws, d: Dataset, psrf_threshold: float = PSRF_THRESHOLD) -> PosteriorSummary:
    """Pool post-burn-in chains into point estimates, intervals, and diagnostics.

    Expects changepoint reordering and (for C >= 2) ECR relabeling to have
    been applied already.
    """
    chains = draws if isinstance(draws, (list, tuple)) else [draws]
    if not chains or any(ch.n_stored == 0 for ch in chains):
        raise ValueError("empty draw archive")
    layout = chains[0].layout
    C, K, N = layout.n_classes, layout.max_changepoints, layout.n_subjects
    states = np.vstack([ch.states for ch in chains])
    T = states.shape[0]

    params = {}
    for j in layout.class_level_columns():
        col = states[:, j]
        lo, hi = np.percentile(col, [2.5, 97.5])
        params[layout.names[j]] = {
            "mean": float(col.mean()),
            "ci_lower": float(lo),
            "ci_upper": float(hi),
        }

    counts = layout.view(states, "count").astype(int)
    count_posterior = np.stack(
        [np.bincount(counts[:, c], minlength=K + 1) / T for c in range(C)]
    )

    psi = layout.view(states, "psi").astype(int)
    membership_probs = np.stack(
        [np.bincount(psi[:, i] - 1, minlength=C) / T for i in range(N)]
    )

    beta = layout.view(states, "beta")
    lam = layout.view(states, "lam")
    n_eff = 2 * K + 2
    corr_sum = np.zeros((C, n_eff, n_eff))
    corr_cnt = np.zeros((C, n_eff, n_eff))
    with np.errstate(invalid="ignore", divide="ignore"):
        for t in range(T):
            eff = np.concatenate([beta[t], lam[t]], axis=1)
            for c in range(C):
                members = psi[t] == c + 1
                if members.sum() < 3:
                    continue
                corr = np.corrcoef(eff[members], rowvar=False)
                finite = np.isfinite(corr)
                corr_sum[c][finite] += corr[finite]
                corr_cnt[c][finite] += 1.0
    with np.errstate(invalid="ignore"):
        correlations = np.where(corr_cnt > 0, corr_sum / np.maximum(corr_cnt, 1.0), np.nan)
    effect_names = [f"beta{k}" for k in range(K + 2)] + [
        f"lambda{k}" for k in range(1, K + 1)
    ]

    table, mpsrf_val, mean_psrf, converged = _diagnostic_tables(chains, psrf_threshold)
    return PosteriorSummary(
        params=params,
        count_posterior=count_posterior,
        membership_probs=membership_probs,
        correlations=correlations,
        effect_names=effect_names,
        subject_ids=[s.id for s in d.subjects],
        dic=dic(chains, d),
        psrf=table,
        mpsrf=mpsrf_val,
        mean_psrf=mean_psrf,
        converged=converged,
        n_chains=len(chains),
        n_draws=T,
        time_shift=d.time_shift,
        max_changepoints=K,
        n_classes=C,
    )


def format_summary_text(summary: PosteriorSummary) -> str:
    """Human-readable per-class estimate table (time-scale values are
    shifted back to the original scale)."""
    C, K = summary.n_classes, summary.max_changepoints
    shift = summary.time_shift

    def fmt(name, add=0.0):
        p = summary.params[name]
        return f"{p['mean'] + add:10.4g} ({p['ci_lower'] + add:.4g}, {p['ci_upper'] + add:.4g})"

    rows = []
    rows.append(("nu", [fmt(f"nu.{c}") for c in range(1, C + 1)]))
    rows.append(("sigma_eps", [fmt("sigma_eps")] * C))
    for k in range(K + 2):
        rows.append((f"beta_{k}", [fmt(f"beta_mean.{c}.{k}") for c in range(1, C + 1)]))
    for k in range(K + 2):
        rows.append((f"sigma_beta_{k}", [fmt(f"sigma_beta.{c}.{k}") for c in range(1, C + 1)]))
    for k in range(1, K + 1):
        rows.append((f"lambda_{k}", [fmt(f"lambda_mean.{c}.{k}", shift) for c in range(1, C + 1)]))
    for k in range(1, K + 1):
        rows.append((f"sigma_lambda_{k}", [fmt(f"sigma_lambda.{c}.{k}") for c in range(1, C + 1)]))

    width = max(len(r[0]) for r in rows) + 2
    header = " " * width + "".join(f"Class {c:<33}" for c in range(1, C + 1))
    lines = [header]
    for name, cells in rows:
        lines.append(f"{name:<{width}}" + "".join(f"{cell:<39}" for cell in cells))
    lines.append("")
    for c in range(1, C + 1):
        probs = ", ".join(
            f"P(K={k})={p:.3f}" for k, p in enumerate(summary.count_posterior[c - 1])
        )
        lines.append(f"class {c} changepoint count: {probs}")
    lines.append(f"DIC: {summary.dic:.2f}")
    lines.append(
        f"mean PSRF: {summary.mean_psrf:.4f}  MPSRF: {summary.mpsrf:.4f}  "
        f"converged: {summary.converged}"
    )
    return "\n".join(lines) + "\n"
