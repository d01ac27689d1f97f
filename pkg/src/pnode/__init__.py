"""Constraint-projected neural ODEs.

Learned continuous-time dynamics whose every integrator step is projected
back onto an algebraic constraint manifold, with a fast single-factorization
projection, a robust re-factorizing one, the stabilized-rhs baseline as a
special case, and a discrete-adjoint training pipeline over six benchmark
systems.
"""

from .autodiff import Tape
from .data import TrajectoryDataset, generate_dataset, load_dataset, save_dataset
from .linalg import SingularMatrixError, finite_diff_jacobian, matvec, solve_spd
from .metrics import EvalReport, evaluate, mean_rel_state_error, mean_sq_constraint_error
from .neuralmodel import (
    MlpDynamics,
    forward,
    forward_with_tape,
    init_mlp,
    load_checkpoint,
    model_for_system,
    rhs_function,
    save_checkpoint,
)
from .odeint import BlowUpError, StepperConfig, Trajectory, empirical_order, integrate, rk4_step
from .projection import (
    ConstraintSpec,
    DivergenceError,
    NonConvergenceError,
    ProjectionConfig,
    ProjectionError,
    ProjectionResult,
    project,
    project_fast,
    project_robust,
    projection_vjp,
    stabilization_term,
)
from .systems import SYSTEM_NAMES, DynamicalSystem, all_systems, make_system
from .training import (
    AdamState,
    DivergedRolloutError,
    TrainConfig,
    Window,
    lbfgs_minimize,
    make_windows,
    train_adam,
    train_lbfgs,
    window_loss,
)

__version__ = "0.1.0"
