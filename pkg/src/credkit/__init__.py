"""Bayesian credibility premiums by importance sampling, scaled to large
portfolios by a credibility-index surrogate.

The usual flow: build or load a `Portfolio`, price a balanced slice of it
exactly with the simulation oracle, fit the surrogate on that slice, then
evaluate everyone else through `predict_batch` at formula cost.
"""

from .balance import (
    BalanceProblem,
    BalanceWarning,
    SelectionReport,
    cube_sample,
    ht_balance_gaps,
    select_subportfolio,
    select_subportfolio_report,
)
from .config import RunConfig, load_config
from .credindex import (
    EdfSpec,
    IndexBatch,
    IndexValue,
    credibility_index,
    index_batch,
    load_index_csv,
    refined_credibility_index,
    save_index_csv,
    sufficient_statistic,
)
from .distributions import (
    Family,
    Link,
    ModelSpec,
    PriorSpec,
    link_mean,
    log_density,
    log_survival,
    mean_value,
    sample,
)
from .errors import (
    ConfigError,
    CredkitError,
    DegenerateWeightsError,
    DivergenceError,
    NumericError,
    ParameterError,
    SchemaError,
    SequencingError,
    SupportError,
)
from .oracle import (
    LowEffectiveSampleWarning,
    PremiumEstimate,
    PremiumPrinciple,
    PrincipleKind,
    PriorDraws,
    conjugate_net_premium,
    draw_prior,
    load_premiums_csv,
    manual_premium,
    manual_premium_batch,
    premium,
    premium_batch,
    save_premiums_csv,
)
from .portfolio import (
    Censor,
    Observation,
    Policyholder,
    Portfolio,
    load_portfolio,
    save_portfolio,
)
from .surrogate import (
    GComponent,
    HComponent,
    Metrics,
    SurrogateConfig,
    SurrogateModel,
    assess,
    fit_surrogate,
    load_model,
    load_predictions_csv,
    metrics_from_values,
    predict_batch,
    predict_premium,
    save_model,
    save_predictions_csv,
    tune_theta,
)
from .synth import (
    AlphaSpec,
    Scenario,
    StudyRow,
    Truths,
    default_prior,
    format_study_table,
    generate_portfolio,
    load_study_csv,
    run_study,
    save_study_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AlphaSpec",
    "BalanceProblem",
    "BalanceWarning",
    "Censor",
    "ConfigError",
    "CredkitError",
    "DegenerateWeightsError",
    "DivergenceError",
    "EdfSpec",
    "Family",
    "GComponent",
    "HComponent",
    "IndexBatch",
    "IndexValue",
    "Link",
    "LowEffectiveSampleWarning",
    "Metrics",
    "ModelSpec",
    "NumericError",
    "Observation",
    "ParameterError",
    "Policyholder",
    "Portfolio",
    "PremiumEstimate",
    "PremiumPrinciple",
    "PrincipleKind",
    "PriorDraws",
    "PriorSpec",
    "RunConfig",
    "Scenario",
    "SchemaError",
    "SelectionReport",
    "SequencingError",
    "StudyRow",
    "SupportError",
    "SurrogateConfig",
    "SurrogateModel",
    "Truths",
    "assess",
    "conjugate_net_premium",
    "credibility_index",
    "cube_sample",
    "default_prior",
    "draw_prior",
    "fit_surrogate",
    "format_study_table",
    "generate_portfolio",
    "ht_balance_gaps",
    "index_batch",
    "link_mean",
    "load_config",
    "load_index_csv",
    "load_model",
    "load_portfolio",
    "load_predictions_csv",
    "load_premiums_csv",
    "load_study_csv",
    "log_density",
    "log_survival",
    "manual_premium",
    "manual_premium_batch",
    "mean_value",
    "metrics_from_values",
    "predict_batch",
    "predict_premium",
    "premium",
    "premium_batch",
    "refined_credibility_index",
    "run_study",
    "sample",
    "save_index_csv",
    "save_model",
    "save_portfolio",
    "save_predictions_csv",
    "save_premiums_csv",
    "save_study_csv",
    "select_subportfolio",
    "select_subportfolio_report",
    "sufficient_statistic",
    "tune_theta",
]
