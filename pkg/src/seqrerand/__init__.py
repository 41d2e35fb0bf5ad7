"""Sequential rerandomization for experiments that enroll units in groups."""
from .budget import TABULATED_BUDGETS, BudgetPlan, allocate, complete_threshold, cp_constant, threshold
from .datagen import (
    CovariateDistribution,
    IngestionSchema,
    gen_covariates,
    ingest_csv,
    sample_ideal_chain,
    sample_ideal_chain_batch,
    surrogate_ucec,
)
from .distributions import (
    NoncentralChi2,
    TruncatedNoncentralChi2,
    chi2_cdf,
    chi2_quantile,
    nc_chi2_cdf,
    nc_chi2_pdf,
    nc_chi2_quantile,
    nc_chi2_truncated_mean,
    small_a_cdf_asymptote,
)
from .engine import (
    OutcomeModel,
    SequentialState,
    TrialOutcome,
    random_balanced_assignment,
    run_complete,
    run_pairwise_qin,
    run_sequential,
    simulate_outcomes,
    tau_hat,
    variance_reduction,
)
from .errors import (
    AllMissingColumn,
    DomainError,
    InfeasibleBudget,
    ParseError,
    RankDeficient,
    SchemaError,
    SeqRerandError,
    ShapeMismatch,
    UnderflowError,
)
from .harness import ExperimentConfig, MonteCarloReport, emit_report, run_experiment
from .linalg import CovariateDataset, Mode, SpdMatrix, mahalanobis_homogeneous, sample_covariance

__version__ = "0.1.0"
