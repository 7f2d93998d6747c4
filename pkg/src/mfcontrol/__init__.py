"""Interacting-particle control: simulation, policy-gradient training, and
exact linear-quadratic benchmarks.

The pieces compose bottom-up: `core` (grids, ensembles, the counter-based
random stream), `riccati` (the closed-form benchmark), `dynamics` (the
particle scheme and rollouts), `cost` (discrete cost functionals), `policy`
(the network, its pathwise gradient, Adam), `linconvex` (the optimality
identity and piecewise-constant projection), `experiments` (training and
convergence drivers), and `cli` (the command-line entry point).
"""

from .core import (
    Ensemble,
    EnsembleMoments,
    SeededStream,
    TimeGrid,
    derive_seed,
    empirical_moments,
    make_uniform_grid,
)
from .cost import CostBreakdown, empirical_cs_cost, generic_discrete_cost
from .dynamics import (
    CsParams,
    Trajectory,
    feedback_from_riccati,
    hold_piecewise,
    rollout,
    sample_initial_ensemble,
    zero_control,
)
from .experiments import (
    ConvergenceReport,
    TrainConfig,
    coarsen_increments,
    convergence_study,
    evaluate_policy,
    fit_loglog_slope,
    train,
)
from .linconvex import (
    LinConvexCoeffs,
    hat_alpha_lq,
    optimality_residual,
    project_piecewise_constant,
    psi_zeta,
)
from .policy import (
    AdamState,
    LrSchedule,
    MlpPolicy,
    adam_step,
    init_policy,
    load_policy,
    mlp_forward,
    rollout_cost_and_grad,
    save_policy,
)
from .riccati import (
    LqParams,
    RiccatiSolution,
    exact_lq_feedback,
    exact_lq_value,
    ode_residual,
    solve_riccati,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ConvergenceReport",
    "CostBreakdown",
    "CsParams",
    "Ensemble",
    "EnsembleMoments",
    "LinConvexCoeffs",
    "LqParams",
    "LrSchedule",
    "MlpPolicy",
    "RiccatiSolution",
    "SeededStream",
    "TimeGrid",
    "TrainConfig",
    "Trajectory",
    "adam_step",
    "coarsen_increments",
    "convergence_study",
    "derive_seed",
    "empirical_cs_cost",
    "empirical_moments",
    "evaluate_policy",
    "exact_lq_feedback",
    "exact_lq_value",
    "feedback_from_riccati",
    "fit_loglog_slope",
    "generic_discrete_cost",
    "hat_alpha_lq",
    "hold_piecewise",
    "init_policy",
    "load_policy",
    "make_uniform_grid",
    "mlp_forward",
    "ode_residual",
    "optimality_residual",
    "project_piecewise_constant",
    "psi_zeta",
    "rollout",
    "rollout_cost_and_grad",
    "sample_initial_ensemble",
    "save_policy",
    "solve_riccati",
    "train",
    "zero_control",
    "__version__",
]
