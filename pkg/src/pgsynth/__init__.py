"""Differentially private synthetic count data via a Poisson-gamma mechanism.

Synthetic count vectors are drawn from the posterior predictive of a
Poisson model with conjugate Gamma priors, conditioned on the public
total. The prior hyperparameters are calibrated so the release satisfies
epsilon-differential privacy against unit transfers between strata;
prior predictive truncation shrinks the required prior weight by
restricting counts to public Poisson-quantile boxes.

Typical flow: load a StrataTable and RatesTable, build_prior, optionally
compute_bounds, solve_hyperparameters, then run_replicates or
sample_counts_matrix. audit() exhaustively verifies the privacy bound on
enumerable instances; the utility module scores replicates against the
confidential table.
"""

from .calibration import (
    Calibration,
    MODE_DIRICHLET,
    MODE_TRUNCATED,
    MODE_UNTRUNCATED,
    calibration_report,
    dirichlet_reduction,
    solve_hyperparameters,
    untruncated_floor,
)
from .errors import (
    CalibrationError,
    DegeneratePriorError,
    DomainError,
    DominanceError,
    EnumerationCapError,
    InapplicableError,
    InfeasibilityError,
    PgsynthError,
    SchemaError,
    UndefinedRateError,
)
from .audit import (
    AuditReport,
    audit,
    exact_joint_pmf,
    prior_allocation_log_pmf,
    ratio_curve,
    theorem1_bound_check,
)
from .fixtures import FixtureSpec, Fixture, generate_fixture
from .strata import (
    PriorSpec,
    RatesTable,
    StrataTable,
    TruncationBounds,
    build_prior,
    check_dominance,
    clamp_observed,
    compute_bounds,
    joint_feasible_bounds,
)
from .synthesizer import (
    SyntheticReplicate,
    read_replicates_csv,
    run_replicates,
    sample_counts_matrix,
    sample_truncated,
    sample_untruncated,
    write_replicates_csv,
)
from .utility import (
    DisparityEstimate,
    StandardPopulation,
    age_adjusted_rate,
    disparity_ratio,
    observed_vs_expected,
    urban_rural_classify,
)

__version__ = "1.0.0"

__all__ = [
    "Calibration",
    "MODE_DIRICHLET",
    "MODE_TRUNCATED",
    "MODE_UNTRUNCATED",
    "calibration_report",
    "dirichlet_reduction",
    "solve_hyperparameters",
    "untruncated_floor",
    "PgsynthError",
    "DomainError",
    "SchemaError",
    "InfeasibilityError",
    "DegeneratePriorError",
    "DominanceError",
    "CalibrationError",
    "EnumerationCapError",
    "InapplicableError",
    "UndefinedRateError",
    "AuditReport",
    "audit",
    "exact_joint_pmf",
    "prior_allocation_log_pmf",
    "ratio_curve",
    "theorem1_bound_check",
    "FixtureSpec",
    "Fixture",
    "generate_fixture",
    "PriorSpec",
    "RatesTable",
    "StrataTable",
    "TruncationBounds",
    "build_prior",
    "check_dominance",
    "clamp_observed",
    "compute_bounds",
    "joint_feasible_bounds",
    "SyntheticReplicate",
    "read_replicates_csv",
    "run_replicates",
    "sample_counts_matrix",
    "sample_truncated",
    "sample_untruncated",
    "write_replicates_csv",
    "DisparityEstimate",
    "StandardPopulation",
    "age_adjusted_rate",
    "disparity_ratio",
    "observed_vs_expected",
    "urban_rural_classify",
    "__version__",
]
