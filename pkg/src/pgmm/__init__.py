"""Bayesian piecewise growth mixture models with latent changepoint counts."""

from .data import (
    Dataset,
    EmpiricalStats,
    ParseError,
    SubjectSeries,
    ValidationError,
    empirical_stats,
    load_long_csv,
    save_long_csv,
    shift_time_origin,
)
from .draws import ChainDraws, ParamLayout
from .model import (
    ClassParams,
    ModelConfig,
    ModelState,
    SubjectEffects,
    log_likelihood,
    mean_trajectory,
    positive_part,
)
from .postprocess import (
    PosteriorSummary,
    dic,
    multivariate_psrf,
    order_changepoint_labels,
    psrf,
    relabel_classes_ecr,
    summarize,
)
from .priors import (
    IndicatorScheme,
    PriorSpec,
    build_default_priors,
    cp_count_distribution,
    half_cauchy_scale_for,
    indicator_probs,
    log_prior,
    sample_prior,
)
from .sampler import (
    SamplerConfig,
    gibbs_sweep,
    initialize_two_stage,
    run_chain,
    run_chains_parallel,
)
from .simulate import (
    RecoveryMetrics,
    ScenarioDesign,
    TrueParams,
    builtin_scenario,
    evaluate_recovery,
    run_replications,
    simulate_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
