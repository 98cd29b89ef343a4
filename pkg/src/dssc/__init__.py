"""Doubly stochastic subspace clustering."""

from .core import (
    AffinityReport,
    CoeffMatrix,
    ConvergenceError,
    DataMatrix,
    DsscError,
    DsscParams,
    FormatError,
    InfeasibleSupportError,
    StochasticAffinity,
    SupportPattern,
    ValidationError,
    symmetrize,
    unit_normalize_columns,
    validate_affinity,
)
from .dsproj import (
    DualPotentials,
    LsrCost,
    ProjectionProblem,
    active_set_project,
    altproj_project,
    dual_objective_grad,
    dual_project,
    init_support,
    recover_primal,
    solve_dual,
)
from .jdssc import AdmmState, StopRule, admm_step, jdssc_solve, joint_objective
from .metrics import EvalReport, accuracy, evaluate, nmi, nnz_per_col, spe
from .selfexpr import WoodburyCache, ensc_solve, lsr_dense, lsr_entries
from .spectral import ClusterLabels, SpectralEmbedding, cluster_pipeline, embed, kmeans, laplacian

__version__ = "0.1.0"
