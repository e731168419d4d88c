"""Robust propensity-score estimation and weighted treatment effects.

The package provides a functional core (data validation, GLM fitting,
covariate-balancing and boosted-tree propensity scores, an integrated
propensity model over candidate specifications, sufficient dimension
reduction, and weighted effect estimators) plus estimator-style wrapper
classes, a Monte Carlo study driver, and a command line interface.
"""

from .boost import (
    BcartConfig,
    BoostModel,
    fit_bcart,
    fit_tree,
    ks_balance,
    predict_bcart,
)
from .cbps import (
    BalanceSpec,
    CbpsFit,
    balance_report,
    fit_cbps,
    moment_residual,
    predict_cbps,
)
from .config import StudyConfig, load_config, parse_config_text, resolved_text
from .data import (
    PS_CEIL,
    PS_FLOOR,
    Dataset,
    PropensityFit,
    as_scores,
    check_treatment,
    clamp_propensity,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from .errors import (
    CollinearPredictors,
    ConfigError,
    CsvFormatError,
    EmptyArm,
    IdentificationFailure,
    InvalidSimplex,
    LengthMismatch,
    MissingOutcome,
    NoConvergence,
    NonBinaryTreatment,
    NonFiniteValue,
    NotADistribution,
    PsrobustError,
    RankDeficientDesign,
    ShapeMismatch,
    SingularWeightMatrix,
    TermSyntaxError,
    ValidationError,
)
from .estimands import (
    AugmentedOutcomeModel,
    EstimateRecord,
    OutcomeModel,
    aipw_ato,
    br_ato,
    fit_br_augmented,
    fit_outcome_model,
    ipw_ate,
    ipw_ato,
)
from .estimators import (
    BoostedTreePropensity,
    CbpsPropensity,
    GlmPropensity,
    IntegratedPropensity,
    ModelAveragePropensity,
    SingleIndexPropensity,
)
from .glm import GlmFit, ModelSpec, fit_glm, gaussian_family, predict_propensity
from .integrated import (
    CandidateSet,
    IntegratedFit,
    MaFit,
    fit_candidates,
    fit_integrated,
    fit_ma,
    kl_gap_discrete,
    predict_integrated,
    predict_ma,
)
from .rng import RngStream, derive_stream
from .sdr import (
    IndexBasis,
    fit_sdr,
    local_logistic,
    nw_conditional_mean,
    predict_sdr,
)
from .simulate import (
    DgpSpec,
    GeneratedSample,
    MonteCarloSummary,
    StudyDesign,
    StudyResult,
    TruthOracle,
    compute_truth,
    generate_dataset,
    raw_table_text,
    run_study,
    scatter_table_text,
    summarize_rows,
    summary_table_text,
)
from .terms import FeatureMap, design_matrix, parse_term

__version__ = "0.1.0"
