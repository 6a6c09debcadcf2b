"""Evaluate CATE estimators on randomized-trial data with the Q statistic.

The Q statistic ``E[tau_hat^2 - 2 tau_hat eta]`` differs from an
estimator's PEHE only by a constant that does not depend on the estimator,
and its sample version needs no counterfactual outcomes. Ranking models by
``Q-hat`` therefore ranks them by their true squared error.
"""

from .bench import (
    BenchmarkReport,
    GridConfig,
    QConfig,
    VerifyConfig,
    emit_report,
    run_benchmark,
    run_verification,
    summarize,
)
from .data import (
    Dataset,
    PredictionTable,
    Provenance,
    SchemaConfig,
    import_predictions,
    load_csv,
    load_dataset,
    preprocess,
    save_dataset,
    split,
)
from .errors import (
    AlignmentError,
    CalibrationError,
    CateqError,
    ConfigError,
    ControlVariateGateError,
    DataError,
    DegenerateDesignError,
    FitError,
    NumericalError,
    SchemaError,
)
from .learners import (
    CateEstimator,
    NuisanceSet,
    Strategy,
    fit_cate,
    fit_nuisances,
    fit_propensity,
    fit_ridge_cv,
    predict_cate,
)
from .qstat import (
    ControlVariate,
    CVKind,
    DensityRatio,
    QResult,
    Screening,
    approximate_mse,
    control_variate_value,
    estimate_density_ratio,
    ht_transform,
    ipw_qhat,
    optimal_theta,
    q_sample,
    qhat,
    screen,
)
from .sampling import BiasingConfig, BiasingFn, build_grid, induced_propensity, make_biasing_fn, observational_sample
from .synthetic import (
    OracleTruth,
    SyntheticConfig,
    gen_outcomes,
    gen_treatment,
    oracle_pehe,
    oracle_rank_agreement,
)

__version__ = "0.1.0"
