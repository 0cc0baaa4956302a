"""Composite quantile-regression kink-point estimation and inference
for longitudinal data.

The package estimates a change point shared across several quantile
levels of a longitudinal response, tests whether a kink exists at all,
and builds Wald, subject-bootstrap, and rank-score test-inversion
confidence intervals around the estimate.  A Monte Carlo harness
reproduces the reference simulation designs at desk scale.
"""

__version__ = "0.1.0"

from .covariance import (
    CovarianceEstimate,
    DensityEstimates,
    WorkingCorrelation,
    assemble_sandwich,
    estimate_concordance,
    estimate_density,
    hall_sheather_bandwidth,
    score_carrier,
)
from .data import (
    LongitudinalDataset,
    QuantileGrid,
    Subject,
    build_kink_design,
    build_null_design,
    read_csv,
    validate,
    write_csv,
)
from .estimator import (
    KinkFit,
    SearchSpec,
    composite_objective,
    estimate,
    predict_quantiles,
    profile_objective,
)
from .qr import QrProblem, QrSolution, check_loss, fit_noncrossing, fit_single, psi
from .rankscore import (
    IntervalResult,
    RankScoreResult,
    TestResult,
    commonality_wald_test,
    invert_ci,
    projected_score,
    rank_score_statistic,
    restricted_fit,
    subject_bootstrap_ci,
    wald_ci,
)
from .simulate import (
    CQR_TAUS,
    DgpSpec,
    McReport,
    generate,
    ls_kink_fit,
    run_power,
    run_table1,
    run_table2,
)
from .slr import SlrResult, bootstrap_pvalue, null_objective, slr_statistic, slr_test

__all__ = [
    "__version__",
    # data
    "LongitudinalDataset",
    "QuantileGrid",
    "Subject",
    "build_kink_design",
    "build_null_design",
    "read_csv",
    "validate",
    "write_csv",
    # solver
    "QrProblem",
    "QrSolution",
    "check_loss",
    "psi",
    "fit_single",
    "fit_noncrossing",
    # estimator
    "KinkFit",
    "SearchSpec",
    "composite_objective",
    "profile_objective",
    "estimate",
    "predict_quantiles",
    # covariance
    "CovarianceEstimate",
    "DensityEstimates",
    "WorkingCorrelation",
    "hall_sheather_bandwidth",
    "estimate_density",
    "estimate_concordance",
    "score_carrier",
    "assemble_sandwich",
    # kink test
    "SlrResult",
    "null_objective",
    "slr_statistic",
    "bootstrap_pvalue",
    "slr_test",
    # intervals and commonality
    "RankScoreResult",
    "IntervalResult",
    "TestResult",
    "restricted_fit",
    "projected_score",
    "rank_score_statistic",
    "invert_ci",
    "wald_ci",
    "subject_bootstrap_ci",
    "commonality_wald_test",
    # simulation
    "DgpSpec",
    "McReport",
    "CQR_TAUS",
    "generate",
    "ls_kink_fit",
    "run_table1",
    "run_power",
    "run_table2",
]
