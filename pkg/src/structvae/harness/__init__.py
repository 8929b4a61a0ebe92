"""Experiment orchestration: config files, sweeps, introspection, tensor files and the CLI."""
from .config import ExperimentSpec, MethodSpec
from .introspection import covariance_rows, run_introspection
from .sweep import SweepReport, run_sweep
from .tensor_io import read_tensor, write_tensor

__all__ = ["ExperimentSpec", "MethodSpec", "SweepReport", "run_sweep", "run_introspection",
           "covariance_rows", "read_tensor", "write_tensor"]
