"""Distribution-free stochastic MPC with conformal joint-in-time constraint tightening."""
from .calibration import (ConfidenceRegion, ScoreFunction, calibrate, conformal_quantile,
                          fit_moments, load_region, pac_tighten, quantile_index, save_region,
                          union_bound_levels)
from .config import RunConfig, load_config, reference_config, validate
from .controller import (ControllerState, SmpcConfig, control_step, initial_state, make_config,
                         open_loop_tube_policy)
from .data import NoiseModel, SplitSpec, TrajectoryDataset, load_dataset, save_dataset, split
from .exceptions import (CalibrationError, ConfigError, DatasetError, DimensionError,
                         EmptySetError, InitialInfeasibilityError, SmpcError, StabilityError)
from .geometry import Ellipsoid, HalfspacePolytope, TerminalSpec, tighten, tighten_inputs
from .propagation import ErrorTrajectorySet, propagate_output_errors, propagate_state_errors
from .qp import QpSolution, QuadraticProgram, kkt_residuals, solve
from .system import CostSpec, LtiSystem, check_schur

__version__ = "0.1.0"
