"""Sparse reduced-rank regression with joint rank and variable selection.

Fits Y = X U diag(D) V^T + E with orthogonality constraints on U and V,
elementwise sparsity on both factors and a columnwise keep-or-kill penalty
that selects the rank, solved by ADMM with gradient steps on the Stiefel
and generalized Stiefel manifolds. Penalty levels are tuned by BIC.
"""

from .exceptions import NumericalError, RetractionError
from .linalg import SpdFactorization, spd_factorize
from .solver import (
    AdmmState,
    ArmijoConfig,
    FactorTriple,
    FitResult,
    SolverConfig,
    extract_rank,
    fit,
    initialize,
)
from .simulation import (
    Dataset,
    MetricsSummary,
    Scenario,
    case_scenario,
    er_xc,
    generate,
    make_scenario,
    make_truth,
    run_replicates,
    support_metrics,
)
from .tuning import TuningGrid, TuningReport, Weights, adaptive_weights, bic, grid_search

__version__ = "0.1.0"

__all__ = [
    "AdmmState",
    "ArmijoConfig",
    "Dataset",
    "FactorTriple",
    "FitResult",
    "MetricsSummary",
    "NumericalError",
    "RetractionError",
    "Scenario",
    "SolverConfig",
    "SpdFactorization",
    "TuningGrid",
    "TuningReport",
    "Weights",
    "adaptive_weights",
    "bic",
    "case_scenario",
    "er_xc",
    "extract_rank",
    "fit",
    "generate",
    "grid_search",
    "initialize",
    "make_scenario",
    "make_truth",
    "run_replicates",
    "spd_factorize",
    "support_metrics",
    "__version__",
]
