"""curvopt: a composable second-order optimizer stack.

Methods are assembled from declarative specs (curvature operator, solver,
preconditioner, damping policy, estimator, telemetry cadences, update
transform chain) into a statically planned step running in one of three
execution lanes: diagonal scaling, parameter-space CG/PCG, or row-space
solves with backprojection.
"""

from .curvature import Snapshot, backproject, ggn_matvec, hessian_matvec, make_snapshot, row_gram
from .errors import AssemblyError, ContractError
from .method import (
    CurvatureSpec,
    DampingSpec,
    EstimatorSpec,
    Method,
    MethodSpec,
    MethodState,
    Plan,
    PRESET_NAMES,
    PrecondSpec,
    SolverSpec,
    TelemetrySpec,
    assemble,
    init,
    make,
    module_diff,
    preset_spec,
    step,
)
from .models import Batch, Model, forward, hvp, init_params, jvp_outputs, loss_and_grad, vjp_outputs
from .numeric import ParamVector, Rng, dot, global_norm, rademacher
from .solvers import CgConfig, SolveResult, cg_solve, damping_to_row, row_solve_cg, row_solve_cholesky, solve_diag
from .telemetry import STEP_INFO_FIELDS, Cadence, StepInfo, gnb_diag, hutchinson_diag, hutchinson_trace, pack_step_info, power_iter_top_eig
from .transforms import Link, chain_apply, chain_init, schedule_value

__version__ = "0.1.0"
