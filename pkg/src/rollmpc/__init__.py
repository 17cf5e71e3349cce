"""Whole-body MPC and utility-based gait sequencing for a wheeled
quadruped, with a deterministic closed-loop simulation harness."""

from .config import ConfigError, Stack, build_stack, load_config
from .fastpath import DynamicsRuntime
from .gait import (GaitConfig, InfeasibleScheduleError, LegReferenceState,
                   ModeSchedule, ReferenceTrajectory, generate_gait,
                   leg_utility, measured_leg_states, rolled_reference)
from .model import (ControlInput, EulerSingularityError, JointLimitError,
                    LegKinematics, RobotModel, State, Terrain,
                    contact_jacobian, euler_rate_transform,
                    forward_kinematics, srbd_derivative, srbd_jacobians,
                    srbd_linearization)
from .ocp import (CostConfig, OCProblem, SwingProfile, assemble_ocp,
                  friction_cone, running_cost, stance_constraints,
                  swing_constraints, terminal_cost)
from .sim import (Disturbance, Scenario, SimLog, UndefinedZmpError,
                  builtin_scenario, export_logs, mechanical_cot,
                  prediction_error, run_scenario, run_scenario_async,
                  summarize, support_margin, zmp, zmp_from_motion)
from .solver import (GenericDynamics, LinearPolicy, RegularizationError,
                     RolloutDivergenceError, SolveResult, SolverSettings,
                     backward_pass, lq_approximation, mpc_step,
                     relaxed_barrier, rollout, slq_solve)

__version__ = "0.1.0"
