from orthoprod.oriv.design import (
    GeneratedDesign,
    build_design_general,
    build_design_production,
    production_factors,
    three_way_split,
)
from orthoprod.oriv.estimate import FoldFit, OrivSet, dump_solutions, estimate_orivs, fold_dictionaries
from orthoprod.oriv.lasso import (
    LassoSolution,
    PenaltyState,
    coordinate_descent,
    init_beta_lowdim,
    kkt_violation,
    lambda_rule,
    soft_threshold,
    solve_weighted_lasso,
    update_loadings,
)
