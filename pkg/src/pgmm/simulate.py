"""Synthetic data generation and recovery scoring.

The scenario registry covers the factorial recovery design built on the
application's fitted values plus the appendix studies: multi-changepoint
detection, multi-class robustness, Dirichlet concentration, and variance
prior alternatives.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SubjectSeries
from .model import ModelConfig
from .pipeline import FitResult, fit_dataset
from .postprocess import PosteriorSummary
from .priors import BINOMIAL, SEQUENTIAL, UNIFORM_SD
from .sampler import SamplerConfig

__all__ = [
    "TrueParams",
    "ScenarioDesign",
    "SimTruth",
    "RecoveryMetrics",
    "simulate_dataset",
    "builtin_scenario",
    "evaluate_recovery",
    "aggregate_recovery",
    "run_replications",
    "z_bias",
    "derive_seed",
]


def derive_seed(*parts) -> int:
    """Deterministic 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class TrueParams:
    """Generating values: class-level parameters, counts, mixing, noise sd."""

    beta_mean: np.ndarray  # (C, K+2)
    beta_sd: np.ndarray  # (C, K+2)
    cp_mean: np.ndarray  # (C, K)
    cp_sd: np.ndarray  # (C, K)
    counts: np.ndarray  # (C,)
    mixing: np.ndarray  # (C,)
    sigma_eps: float

    @property
    def n_classes(self) -> int:
        return len(self.mixing)

    @property
    def max_changepoints(self) -> int:
        return self.cp_mean.shape[1]


@dataclass(frozen=True)
class ScenarioDesign:
    """Sampling design plus the fit settings used by the harness."""

    name: str
    n_subjects: int
    time_grid: tuple
    seed: int = 0
    random_membership: bool = False
    fit_max_cp: int = 2
    fit_classes: int = 2
    cp_prior_kind: str = SEQUENTIAL
    cp_prior_p: float = 0.5
    alpha: float = 1.0
    variance_family: str = UNIFORM_SD

    def __post_init__(self):
        if len(self.time_grid) < 2:
            raise ValueError("time grid needs at least 2 occasions")
        if np.any(np.diff(np.asarray(self.time_grid)) <= 0):
            raise ValueError("time grid must be strictly increasing")

    @property
    def n_occasions(self) -> int:
        return len(self.time_grid)


@dataclass(frozen=True)
class SimTruth:
    """Generating parameters plus the latent memberships and effects."""

    params: TrueParams
    membership: np.ndarray  # (N,) 0-based
    beta: np.ndarray  # (N, K+2)
    lam: np.ndarray  # (N, K)


def _fixed_membership(nu: np.ndarray, n: int) -> np.ndarray:
    sizes = np.floor(nu * n).astype(int)
    # distribute the remainder by largest fractional part, ties to lower class
    rem = n - sizes.sum()
    fracs = nu * n - np.floor(nu * n)
    for c in np.argsort(-fracs, kind="stable")[:rem]:
        sizes[c] += 1
    return np.repeat(np.arange(len(nu)), sizes)


def simulate_dataset(p: TrueParams, design: ScenarioDesign, rng) -> tuple[Dataset, SimTruth]:
    """Generate a panel from the model; the truth record keeps the latents.

    Class sizes are fixed at round(N * nu_c) by default, matching the
    recovery design's exact splits; set ``random_membership`` for i.i.d.
    categorical memberships.
    """
    n = design.n_subjects
    x = np.asarray(design.time_grid, dtype=float)
    if design.random_membership:
        membership = rng.choice(p.n_classes, size=n, p=p.mixing / p.mixing.sum())
    else:
        membership = _fixed_membership(np.asarray(p.mixing, dtype=float), n)
    beta = rng.normal(p.beta_mean[membership], p.beta_sd[membership])
    K = p.max_changepoints
    lam = (
        rng.normal(p.cp_mean[membership], p.cp_sd[membership])
        if K
        else np.zeros((n, 0))
    )
    counts = p.counts[membership]
    mu = beta[:, 0, None] + beta[:, 1, None] * x[None, :]
    if K:
        hinge = np.maximum(x[None, None, :] - lam[:, :, None], 0.0)
        active = np.arange(K)[None, :] < counts[:, None]
        mu += (beta[:, 2:, None] * hinge * active[:, :, None]).sum(axis=1)
    y = mu + rng.normal(0.0, p.sigma_eps, size=mu.shape)
    width = max(len(str(n)), 3)
    subjects = tuple(
        SubjectSeries(f"s{i + 1:0{width}d}", x.copy(), y[i]) for i in range(n)
    )
    return Dataset(subjects), SimTruth(
        params=p, membership=membership.astype(int), beta=beta, lam=lam
    )


# ---------------------------------------------------------------------------
# scenario registry
# ---------------------------------------------------------------------------

# Fitted values from the application's two-class, two-changepoint model,
# reused as generating truth for the recovery experiments.
_APPLICATION_TRUTH = {
    "sigma_eps": 3.16,
    "class1": {
        "beta": (0.003, -0.002, 0.194, -0.171),
        "sigma_beta": (0.020, 0.010, 0.064, 0.079),
        "lambda": (362.0, 643.0),
        "sigma_lambda": (93.6, 149.0),
    },
    "class2": {
        "beta": (0.000, -0.005, 0.060, 0.081),
        "sigma_beta": (0.019, 0.008, 0.027, 0.068),
        "lambda": (321.0, 726.0),
        "sigma_lambda": (132.0, 128.0),
    },
}


def _main_scenario(n=60, m=50, nu1=0.8, k2=2, **fit_overrides):
    if k2 not in (0, 1, 2):
        raise ValueError("k2 must be 0, 1, or 2")
    t = _APPLICATION_TRUTH
    params = TrueParams(
        beta_mean=np.array([t["class1"]["beta"], t["class2"]["beta"]]),
        beta_sd=np.array([t["class1"]["sigma_beta"], t["class2"]["sigma_beta"]]),
        cp_mean=np.array([t["class1"]["lambda"], t["class2"]["lambda"]]),
        cp_sd=np.array([t["class1"]["sigma_lambda"], t["class2"]["sigma_lambda"]]),
        counts=np.array([2, k2]),
        mixing=np.array([nu1, 1.0 - nu1]),
        sigma_eps=t["sigma_eps"],
    )
    step = 1000.0 / m
    grid = tuple(step * j for j in range(1, m + 1))
    design = ScenarioDesign(
        name=f"main(N={n},M={m},nu1={nu1},K2={k2})",
        n_subjects=n,
        time_grid=grid,
        fit_max_cp=2,
        fit_classes=2,
        **fit_overrides,
    )
    return params, design


def _appendix_a_scenario(k_true=2, sigma_lambda=0.2, **fit_overrides):
    if not 0 <= k_true <= 5:
        raise ValueError("k_true must lie in 0..5")
    # N(mean, variance) convention: effect variances 0.05, error variance 0.5
    sd_eff = math.sqrt(0.05)
    params = TrueParams(
        beta_mean=np.array([[0.0] + [(-1.0) ** k for k in range(6)]]),
        beta_sd=np.full((1, 7), sd_eff),
        cp_mean=np.array([[3.0, 6.0, 9.0, 12.0, 15.0]]),
        cp_sd=np.full((1, 5), float(sigma_lambda)),
        counts=np.array([k_true]),
        mixing=np.ones(1),
        sigma_eps=math.sqrt(0.5),
    )
    fit = {"cp_prior_kind": BINOMIAL, "cp_prior_p": 0.5}
    fit.update(fit_overrides)
    design = ScenarioDesign(
        name=f"appendixA(K={k_true},sigma_lambda={sigma_lambda})",
        n_subjects=30,
        time_grid=tuple(float(j) for j in range(20)),
        fit_max_cp=5,
        fit_classes=1,
        **fit,
    )
    return params, design


def _appendix_b_scenario(n_classes_present=4, **fit_overrides):
    # Class parameter values are not published for this illustration; the
    # registry uses well-separated lines: slope changes alternate by +/- 1
    # starting from slope 1, changepoints evenly spaced over the time range.
    if not 1 <= n_classes_present <= 4:
        raise ValueError("n_classes_present must lie in 1..4")
    K = 3
    t_max = 9.0
    beta_mean = np.zeros((4, K + 2))
    cp_mean = np.zeros((4, K))
    counts = np.arange(4)
    for c in range(4):
        beta_mean[c, 1] = 1.0
        for k in range(K):
            beta_mean[c, k + 2] = (-1.0) ** (k + 1)
        m = counts[c]
        cps = [t_max * (j + 1) / (m + 1) for j in range(m)]
        cps += [t_max * 0.5] * (K - m)  # inactive placeholders
        cp_mean[c] = cps
    params = TrueParams(
        beta_mean=beta_mean[:n_classes_present],
        beta_sd=np.full((n_classes_present, K + 2), 0.05)
        * np.array([2.0] + [1.0] * (K + 1)),  # intercept sd 0.1
        cp_mean=cp_mean[:n_classes_present],
        cp_sd=np.full((n_classes_present, K), 0.3),
        counts=counts[:n_classes_present],
        mixing=np.full(n_classes_present, 1.0 / n_classes_present),
        sigma_eps=0.3,
    )
    design = ScenarioDesign(
        name=f"appendixB({n_classes_present})",
        n_subjects=10 * n_classes_present,
        time_grid=tuple(float(j) for j in range(10)),
        fit_max_cp=3,
        fit_classes=4,
        **fit_overrides,
    )
    return params, design


def builtin_scenario(name: str, **overrides):
    """Named scenario registry; returns (TrueParams, ScenarioDesign)."""
    registry = {
        "main": _main_scenario,
        "appendixA": _appendix_a_scenario,
        "appendixB": _appendix_b_scenario,
        "appendixC": lambda alpha=1.0, **kw: _main_scenario(alpha=alpha, **kw),
        "appendixD": lambda variance_family=UNIFORM_SD, **kw: _main_scenario(
            variance_family=variance_family, **kw
        ),
    }
    if name not in registry:
        raise ValueError(f"unknown scenario {name!r}")
    return registry[name](**overrides)


# ---------------------------------------------------------------------------
# recovery scoring
# ---------------------------------------------------------------------------

def z_bias(mean: float, truth: float, sd: float) -> float:
    """Standardized bias (mean - truth) / sd; exactly 0 when mean == truth."""
    if mean == truth:
        return 0.0
    if sd == 0.0:
        return math.inf if mean > truth else -math.inf
    return (mean - truth) / sd


@dataclass
class RecoveryMetrics:
    """Recovery scores; a single fit and an aggregate share this shape."""

    misclassification: float
    p_true_count: np.ndarray  # per true class
    params: dict  # name -> {"truth","mean","sd","z_bias","coverage"}
    convergence_rate: float
    n_reps: int = 1
    n_converged: int = 1


def _match_classes(true_membership, modal_fitted, n_fit_classes):
    n_true = int(true_membership.max()) + 1
    agree = np.zeros((n_fit_classes, n_fit_classes))
    for t_c, f_c in zip(true_membership, modal_fitted):
        agree[t_c, f_c] += 1
    best_perm, best_score = None, -1.0
    for perm in itertools.permutations(range(n_fit_classes)):
        score = sum(agree[t, perm[t]] for t in range(n_fit_classes))
        if score > best_score:
            best_score = score
            best_perm = perm
    return np.array(best_perm[:n_true]), best_score


def _truth_param_table(p: TrueParams):
    table = {"sigma_eps": p.sigma_eps}
    C, K = p.n_classes, p.max_changepoints
    for c in range(C):
        table[f"nu.{c + 1}"] = float(p.mixing[c])
        for k in range(K + 2):
            table[f"beta_mean.{c + 1}.{k}"] = float(p.beta_mean[c, k])
            table[f"sigma_beta.{c + 1}.{k}"] = float(p.beta_sd[c, k])
        for k in range(K):
            table[f"lambda_mean.{c + 1}.{k + 1}"] = float(p.cp_mean[c, k])
            table[f"sigma_lambda.{c + 1}.{k + 1}"] = float(p.cp_sd[c, k])
    return table


def evaluate_recovery(fit: PosteriorSummary, truth: SimTruth) -> RecoveryMetrics:
    """Score one fitted summary against its generating truth.

    Fitted classes are matched to true classes by maximum membership
    agreement, so the score is invariant to fitted label permutations.
    Time-scale estimates are mapped back through the fit's time shift.
    """
    p = truth.params
    n = len(truth.membership)
    modal = fit.membership_probs.argmax(axis=1)
    matched, score = _match_classes(truth.membership, modal, fit.n_classes)
    misclassification = 1.0 - score / n

    p_true = np.array(
        [
            fit.count_posterior[matched[c], int(p.counts[c])]
            if int(p.counts[c]) < fit.count_posterior.shape[1]
            else 0.0
            for c in range(p.n_classes)
        ]
    )

    truths = _truth_param_table(p)
    params = {}
    K_fit = fit.max_changepoints
    for name, tv in truths.items():
        parts = name.split(".")
        if len(parts) == 1:
            fit_name = name
        else:
            c_true = int(parts[1]) - 1
            k_part = f".{parts[2]}" if len(parts) > 2 else ""
            if len(parts) > 2 and "lambda" in parts[0] and int(parts[2]) > K_fit:
                continue
            if len(parts) > 2 and "beta" in parts[0] and int(parts[2]) > K_fit + 1:
                continue
            fit_name = f"{parts[0]}.{matched[c_true] + 1}{k_part}"
        if fit_name not in fit.params:
            continue
        est = fit.params[fit_name]
        shift = fit.time_shift if name.startswith("lambda_mean") else 0.0
        mean = est["mean"] + shift
        covered = est["ci_lower"] + shift <= tv <= est["ci_upper"] + shift
        params[name] = {
            "truth": tv,
            "mean": mean,
            "sd": 0.0,
            "z_bias": z_bias(mean, tv, 0.0),
            "coverage": 1.0 if covered else 0.0,
        }
    return RecoveryMetrics(
        misclassification=float(misclassification),
        p_true_count=p_true,
        params=params,
        convergence_rate=1.0 if fit.converged else 0.0,
        n_reps=1,
        n_converged=1 if fit.converged else 0,
    )


def aggregate_recovery(metrics: list[RecoveryMetrics]) -> RecoveryMetrics:
    """Aggregate per-replication scores; parameter and classification
    summaries use converged replications only."""
    n_reps = len(metrics)
    converged = [m for m in metrics if m.convergence_rate > 0.0]
    n_conv = len(converged)
    used = converged if converged else []
    if used:
        mis = float(np.mean([m.misclassification for m in used]))
        p_true = np.mean([m.p_true_count for m in used], axis=0)
        names = used[0].params.keys()
        params = {}
        for name in names:
            ests = np.array([m.params[name]["mean"] for m in used])
            tv = used[0].params[name]["truth"]
            sd = float(np.std(ests, ddof=1)) if len(ests) > 1 else 0.0
            params[name] = {
                "truth": tv,
                "mean": float(ests.mean()),
                "sd": sd,
                "z_bias": z_bias(float(ests.mean()), tv, sd),
                "coverage": float(np.mean([m.params[name]["coverage"] for m in used])),
            }
    else:
        mis = float("nan")
        p_true = np.full_like(metrics[0].p_true_count, np.nan, dtype=float)
        params = {}
    return RecoveryMetrics(
        misclassification=mis,
        p_true_count=p_true,
        params=params,
        convergence_rate=n_conv / n_reps if n_reps else float("nan"),
        n_reps=n_reps,
        n_converged=n_conv,
    )


def run_replications(
    scenario,
    n_reps: int,
    sampler_cfg: SamplerConfig,
    parallel: bool = True,
    keep_fits: bool = False,
):
    """Simulate, fit, and score ``n_reps`` independent replications.

    Returns ``(aggregate, records)``; each record carries the seed,
    convergence flag, and per-parameter estimates of one replication.
    ``keep_fits`` additionally returns the per-rep FitResult list.
    """
    params, design = scenario
    all_metrics = []
    records = []
    fits = []
    for rep in range(n_reps):
        sim_rng = np.random.default_rng(
            np.random.SeedSequence([design.seed, rep, 2024])
        )
        dataset, truth = simulate_dataset(params, design, sim_rng)
        rep_seed = derive_seed(design.seed, rep, 7)
        rep_cfg = replace(sampler_cfg, master_seed=rep_seed)
        fit = fit_dataset(
            dataset,
            ModelConfig(design.fit_max_cp, design.fit_classes),
            rep_cfg,
            cp_count_kind=design.cp_prior_kind,
            cp_count_p=design.cp_prior_p,
            alpha=design.alpha,
            variance_family=design.variance_family,
            parallel=parallel,
        )
        metrics = evaluate_recovery(fit.summary, truth)
        all_metrics.append(metrics)
        record = {
            "scenario": design.name,
            "rep": rep,
            "seed": rep_seed,
            "converged": int(fit.summary.converged),
            "mean_psrf": fit.summary.mean_psrf,
            "mpsrf": fit.summary.mpsrf,
            "misclassification": metrics.misclassification,
            "dic": fit.summary.dic,
        }
        for c, v in enumerate(metrics.p_true_count):
            record[f"p_true_count.{c + 1}"] = float(v)
        for name, entry in metrics.params.items():
            record[f"est.{name}"] = entry["mean"]
            record[f"cover.{name}"] = entry["coverage"]
        records.append(record)
        if keep_fits:
            fits.append(fit)
    aggregate = aggregate_recovery(all_metrics)
    if keep_fits:
        return aggregate, records, fits
    return aggregate, records
