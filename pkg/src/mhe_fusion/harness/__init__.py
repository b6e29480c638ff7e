"""Simulation, filtering baseline and benchmark reporting."""
from .config import SimConfig, load_config
from .iekf import IEKF, check_single_process_per_portion
from .report import RunResult, load_run, report, save_run
from .runner import EstimatorError, MetricsReport, TrajectoryLog, run_iekf, run_mhe
from .simulate import Dataset, simulate
from .sweep import sweep
