"""Treatment variant aggregation for cross-randomized experiments.

Selects which policy variants of a factorial experiment to pool or
prune by running a preconditioned LASSO (or backward elimination) on a
marginal-effects reparameterization of the policy lattice, estimates
the pooled effects by post-selection regression, and reports a
winner's-curse-adjusted estimate for the best pooled policy, with a
simulation harness and a command line interface on top.
"""

from .errors import (
    ConvergenceError,
    EmptyCellError,
    InvalidDesignError,
    PoolSizeError,
    SchemaError,
    SingularDesignError,
    StageError,
    TVAError,
)
from .estimation import (
    BestPolicy,
    EstimationResult,
    best_policy,
    fit,
    fit_from_cell_stats,
    fit_pooled,
    pooled_dummies,
)
from .lattice import (
    FactorialDesign,
    PolicyLattice,
    alpha_to_beta,
    beta_to_alpha,
    enumerate_policies,
    marginal_matrix,
    policy_index,
    profile_of,
    relation_matrix,
    unique_policy_matrix,
)
from .pipeline import (
    ArmSpec,
    Dataset,
    DatasetSchema,
    PipelineConfig,
    PipelineReport,
    ingest,
    run_pipeline,
    sweep_pipeline,
)
from .pooling import (
    AdmissibilityReport,
    PooledPartition,
    format_policy,
    pool,
    sphere,
    validate_admissible,
)
from .precondition import (
    PufferDecomposition,
    irrepresentability_l1,
    limiting_gram,
    min_singular_closed_form,
    puffer,
    puffer_row_normalized,
)
from .selection import (
    SelectionResult,
    SweepEntry,
    backward_eliminate,
    backward_eliminate_moments,
    lambda_sweep,
    lasso,
    lasso_from_moments,
    soft_threshold,
)
from .simharness import (
    SimulationConfig,
    StabilityReport,
    StudyReport,
    best_inclusion,
    best_policy_mse,
    bootstrap_stability,
    draw_configuration,
    generate,
    run_study,
    support_accuracy,
)
from .winners_curse import (
    HybridEstimate,
    conditional_median_estimate,
    hybrid,
    projection_quantile,
    truncated_normal_cdf,
    truncation_bounds,
)

__version__ = "0.1.0"

__all__ = [
    "TVAError", "InvalidDesignError", "SchemaError", "EmptyCellError",
    "SingularDesignError", "ConvergenceError", "PoolSizeError", "StageError",
    "FactorialDesign", "PolicyLattice", "enumerate_policies", "policy_index",
    "profile_of", "relation_matrix", "marginal_matrix",
    "unique_policy_matrix", "alpha_to_beta", "beta_to_alpha",
    "PufferDecomposition", "puffer", "puffer_row_normalized",
    "irrepresentability_l1", "limiting_gram", "min_singular_closed_form",
    "SelectionResult", "SweepEntry", "soft_threshold", "lasso",
    "lasso_from_moments", "backward_eliminate", "backward_eliminate_moments",
    "lambda_sweep",
    "PooledPartition", "AdmissibilityReport", "format_policy", "pool",
    "sphere", "validate_admissible",
    "EstimationResult", "BestPolicy", "pooled_dummies", "fit", "fit_pooled",
    "fit_from_cell_stats", "best_policy",
    "HybridEstimate", "truncated_normal_cdf", "truncation_bounds",
    "conditional_median_estimate", "projection_quantile", "hybrid",
    "SimulationConfig", "StudyReport", "StabilityReport", "generate",
    "draw_configuration", "support_accuracy", "best_inclusion",
    "best_policy_mse", "run_study", "bootstrap_stability",
    "ArmSpec", "DatasetSchema", "Dataset", "PipelineConfig",
    "PipelineReport", "ingest", "run_pipeline", "sweep_pipeline",
    "__version__",
]
