"""Objective-free box-constrained optimization: adaptive gradient steps with
multilevel, domain-decomposition, and hybrid drivers.

Solvers consume (possibly noisy) gradients and directional curvature only;
objective values exist for reporting passes and are guarded against use in
solver code.  Costs are tracked in fine-level gradient-evaluation
equivalents across per-level and subdomain streams.
"""

from .core import (
    BoundBox,
    CostLedger,
    EvalCounter,
    Objective,
    ObjectiveValueError,
    ProblemObjective,
    criticality_d,
    criticality_xi,
    objective_guard,
    project_box,
    reporting_pass,
)
from .hybrid import HybridSolver
from .multilevel import (
    GalerkinObjective,
    InvariantChecks,
    MultilevelEngine,
    MultilevelSolver,
    SingleLevelSolver,
    StopRule,
    TauCorrectedObjective,
    run_level,
)
from .noise import NoiseSchedule, NoisyObjective, gaussian_draw
from .problems import (
    GridProblem,
    Hierarchy,
    build_hierarchy,
    kkt_enumeration_solution,
    membrane,
    minsurf,
    random_obstacle_instance,
    synthetic_quadratic_obstacle,
)
from .schwarz import (
    VARIANTS,
    Covering,
    DecompositionSolver,
    SchwarzOperator,
    SubdomainObjective,
    bound_identity_error,
    build_block_covering,
    build_operators,
    restrict_bounds,
)
from .steps import (
    StepParams,
    cauchy_scaling,
    linear_step,
    nogain_check,
    readjust_level_entry,
    taylor_step,
    update_weights,
)
from .trace import Trace, config_hash
from .transfer import (
    TensorGrid,
    TransferPair,
    build_linear_interpolation,
    lower_level_bounds,
    prolong_step,
    restrict_state,
    truncate,
)

__version__ = "0.1.0"

__all__ = [
    "BoundBox",
    "CostLedger",
    "Covering",
    "DecompositionSolver",
    "EvalCounter",
    "GalerkinObjective",
    "GridProblem",
    "Hierarchy",
    "HybridSolver",
    "InvariantChecks",
    "MultilevelEngine",
    "MultilevelSolver",
    "NoiseSchedule",
    "NoisyObjective",
    "Objective",
    "ObjectiveValueError",
    "ProblemObjective",
    "SchwarzOperator",
    "SingleLevelSolver",
    "StepParams",
    "StopRule",
    "SubdomainObjective",
    "TauCorrectedObjective",
    "TensorGrid",
    "Trace",
    "TransferPair",
    "VARIANTS",
    "bound_identity_error",
    "build_block_covering",
    "build_hierarchy",
    "build_linear_interpolation",
    "build_operators",
    "cauchy_scaling",
    "config_hash",
    "criticality_d",
    "criticality_xi",
    "gaussian_draw",
    "kkt_enumeration_solution",
    "linear_step",
    "lower_level_bounds",
    "membrane",
    "minsurf",
    "nogain_check",
    "objective_guard",
    "project_box",
    "prolong_step",
    "random_obstacle_instance",
    "readjust_level_entry",
    "reporting_pass",
    "restrict_bounds",
    "restrict_state",
    "run_level",
    "synthetic_quadratic_obstacle",
    "taylor_step",
    "truncate",
    "update_weights",
]
