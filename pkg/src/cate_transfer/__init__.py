"""Transfer estimation of conditional average treatment effects across sites."""

from .data_io import (
    ColumnSchema,
    Dataset,
    Design,
    Role,
    Sampling,
    SiteSample,
    UnitRecord,
    ingest_csv,
    read_results,
    write_dataset_csv,
    write_results,
)
from .densities import GaussianDensity, LogNormalDensity, UniformDensity, density_from_descriptor
from .kernels import (
    KernelFamily,
    KernelSpec,
    LocalFitDiagnostics,
    dyadic_local_linear,
    h_rate_rule,
    kernel_eval,
    local_linear_mean,
)
from .operators import (
    DiscretizedFunction,
    OperatorMatrix,
    QuadratureGrid,
    default_bounds,
    default_f0,
    estimate_covariance_cluster_design,
    estimate_covariance_kernels,
    estimate_mean_functions,
    inner_product,
    make_grid,
    psd_project,
)
from .basis import BasisSet, FpcBasis, compute_psi, solve_fpc, solve_optimal_basis
from .transfer import (
    CatePrediction,
    ScoreVector,
    compute_scores,
    evaluate_holdout_correlation,
    predict_cate,
    site_average_effect,
    study_aggregate,
)
from .tuning import CvPlan, CvReport, cv_bandwidth_cov, cv_bandwidth_mean, cv_regularization, run_cv
from .simulator import (
    AssignmentProtocol,
    PopulationConfig,
    SyntheticPopulation,
    generate_population,
    oracle_imse,
    oracle_operators,
    rate_experiment,
    sample_dataset,
)

__version__ = "0.1.0"
