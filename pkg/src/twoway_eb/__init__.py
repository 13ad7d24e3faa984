"""Shrinkage estimation of two-way effects from bipartite matched panels.

Estimates row effects (e.g. student ability) and column effects (e.g.
teacher value-added) that are weakly identified when few units move
between groups. The posterior-mean family shrinks the least squares
solution toward a structured prior; hyperparameters are chosen by
unbiased-risk or marginal-likelihood minimization.

Typical flow::

    panel = read_panel_csv("panel.csv")
    graph = build_graph(panel)
    problem = ShrinkageProblem(graph, panel.y)
    choice = select(problem, criterion="ure", weight=WeightSpec("beta"))
    result = posterior_mean(graph, panel.y, choice.hyperparams)
"""

from .criteria import (
    CriterionValue,
    ShrinkageProblem,
    WeightSpec,
    compound_loss,
    marginal_neg_loglik,
    oracle_loss_curve,
    ure,
)
from .estimators import (
    ConstantMu,
    CovariateIndex,
    EstimateResult,
    Hyperparams,
    LimitFlag,
    ls_estimate,
    minnorm_ls_solution,
    moment_lambda_b,
    mu_j,
    one_way_shrink,
    oneway_sigma2,
    partial_out_covariates,
    posterior_mean,
    projected_one_way_shrink,
    rotate_to_normalized,
    rotate_transpose,
    sigma2_estimate,
)
from .graph import (
    BipartiteGraph,
    ComponentMap,
    ConnectivityReport,
    EigenSolverError,
    GraphError,
    MatchedPanel,
    PanelError,
    build_graph,
    connected_components,
    connectivity_report,
    drop_isolated_units,
    extract_largest_component,
    laplacian_apply,
    normalized_adjacency_apply,
    projected_laplacian,
    read_panel_csv,
    smallest_nonzero_eigs,
    write_panel_csv,
)
from .hyperopt import (
    GridSpec,
    SelectionResult,
    concentrate_delta_ure,
    concentrate_mu_mle,
    concentrate_mu_ure,
    select,
    select_oracle,
    sweep,
)
from .simulate import (
    DESIGNS,
    DesignParams,
    ExperimentReport,
    empirical_moments,
    generate_design,
    parse_dist,
    quintile_crosstab,
    run_experiment,
    run_replication,
)
from .sparse_linalg import (
    ShiftedPrecisionOperator,
    SolverConfig,
    SolverError,
    TraceEstimate,
    cg_solve,
    draw_probes,
    hutchinson_trace,
    logdet_shifted,
)

__version__ = "0.1.0"

__all__ = [
    "BipartiteGraph",
    "ComponentMap",
    "ConnectivityReport",
    "ConstantMu",
    "CovariateIndex",
    "CriterionValue",
    "DESIGNS",
    "DesignParams",
    "EigenSolverError",
    "EstimateResult",
    "ExperimentReport",
    "GraphError",
    "GridSpec",
    "Hyperparams",
    "LimitFlag",
    "MatchedPanel",
    "PanelError",
    "SelectionResult",
    "ShiftedPrecisionOperator",
    "ShrinkageProblem",
    "SolverConfig",
    "SolverError",
    "TraceEstimate",
    "WeightSpec",
    "build_graph",
    "cg_solve",
    "compound_loss",
    "concentrate_delta_ure",
    "concentrate_mu_mle",
    "concentrate_mu_ure",
    "connected_components",
    "connectivity_report",
    "draw_probes",
    "drop_isolated_units",
    "empirical_moments",
    "extract_largest_component",
    "generate_design",
    "hutchinson_trace",
    "laplacian_apply",
    "logdet_shifted",
    "ls_estimate",
    "marginal_neg_loglik",
    "minnorm_ls_solution",
    "moment_lambda_b",
    "mu_j",
    "normalized_adjacency_apply",
    "one_way_shrink",
    "oneway_sigma2",
    "oracle_loss_curve",
    "parse_dist",
    "partial_out_covariates",
    "posterior_mean",
    "projected_laplacian",
    "projected_one_way_shrink",
    "quintile_crosstab",
    "read_panel_csv",
    "rotate_to_normalized",
    "rotate_transpose",
    "run_experiment",
    "run_replication",
    "select",
    "select_oracle",
    "sigma2_estimate",
    "smallest_nonzero_eigs",
    "sweep",
    "ure",
    "write_panel_csv",
]
