"""GEE fits of a two-compartment infusion model with per-SNP robust tests.

The working model treats log-concentration as a fixed-effects nonlinear
curve with genotype shifts on all four log-scale parameters; inference uses
the empirical sandwich covariance with small-sample corrections (leverage
adjustment, per-contrast satterthwaite-type degrees of freedom, and a joint
F test per parameter). sim_harness reproduces the operating-characteristic
study; scan_cli adds table loading, the batch SNP scan, and the CLI.
"""

from .errors import (
    DegenerateRoots,
    EvalFailure,
    JoinError,
    LeverageSingular,
    NonPositiveConcentration,
    NotConverged,
    NotEstimable,
    ParseError,
    PkGeeError,
    SchemaError,
    SingularContrastCovariance,
    SingularInformation,
    UnsupportedGrid,
    ZeroTrace,
)
from .gee_engine import (
    DEFAULT_INTERCEPTS,
    FitGroup,
    GeeFit,
    SolverConfig,
    SubjectRecord,
    WorkingModel,
    initialize,
    score_and_info,
    solve,
)
from .inference import (
    EFFECT_CONTRASTS,
    Contrast,
    CovarianceEstimate,
    TestResult,
    bias_corrected_sandwich,
    coefficient_contrast,
    f_test,
    fai_cornelius_denominator_df,
    fay_graubard_df,
    leverage,
    sandwich,
    wald_test,
    weighted_average_target,
)
from .pk_model import (
    COEF_NAMES,
    N_COEF,
    PARAM_NAMES,
    DesignMatrix,
    Genotype,
    InfusionSpec,
    PkParams,
    concentration,
    hybrid_rate_constants,
    individual_params,
    jacobian_row,
    log_concentration,
    log_curve_and_gradient,
)
from .scan_cli import (
    CONC_COLUMNS,
    GenotypeMatrix,
    ScanPolicy,
    ScanRow,
    cli,
    format_fit_block,
    load_tables,
    scan,
    write_scan_csv,
)
from .sim_harness import (
    EFFECT_COEF_INDICES,
    STUDY_INTERCEPTS,
    STUDY_TIMES,
    MonteCarloSummary,
    ScenarioConfig,
    format_summary,
    generate_dataset,
    genotype_counts,
    run_study,
    true_beta,
    write_summary_csv,
)

__version__ = "0.1.0"
