"""Moving-horizon estimation for asynchronous multi-sensor robot state estimation."""
from .engine import (CalibrationReport, Engine, EngineConfig, EstimateOutput, IncompleteChainError,
                     batch_calibrate, write_estimate_stream)
from .manifold import (Angle, Euclidean, ManifoldError, ManifoldKind, ParameterBlock, UnitQuaternion,
                       boxminus, boxplus, wrap_angle)
from .marginalization import (MarginalizationError, PriorConstraint, build_prior, factor_out,
                              marginalize, schur_marginalize)
from .problem import (AssignmentError, ConfigurationError, ObservabilityError, ProcessMeasurement,
                      ProcessModel, Problem, State, UpdateMeasurement, UpdateModel)
from .solver import (FactorizationError, Huber, SolverError, SolverOptions, optimize, solve_damped)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
