"""Linear backward stochastic Volterra integral equations on an infinite horizon.

Resolvent kernels, explicit solutions, Girsanov-weighted Monte Carlo and
finite-difference Clark-Ocone integrands.
"""

from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .errors import (AssumptionViolated, BSVIEError, ContractionViolated, Divergent, InstabilityDetected,
                     InvalidParameter, MeasureDegenerate, NoConvergence, NumericError, RegressionSingular,
                     SingularSystem)
from .kernels import (ResolventTable, TwoTimeKernel, make_example1_kernel, make_separable_kernel,
                      resolvent_nystrom, resolvent_series, weighted_norm_L, zero_kernel)
from .solver import BSVIEProblem, Driver, deterministic_driver, zero_driver
from .stochastics import JumpSpec, PathBundle, girsanov_weights, simulate_paths
from .timegrid import TimeGrid, build_graded_grid

__all__ = [
    "AssumptionViolated", "BSVIEError", "BSVIEProblem", "ContractionViolated", "Divergent", "Driver",
    "InstabilityDetected", "InvalidParameter", "JumpSpec", "MeasureDegenerate", "NoConvergence",
    "NumericError", "PathBundle", "RegressionSingular", "ResolventTable", "SingularSystem", "TimeGrid",
    "TwoTimeKernel", "build_graded_grid", "deterministic_driver", "girsanov_weights",
    "make_example1_kernel", "make_separable_kernel", "resolvent_nystrom", "resolvent_series",
    "simulate_paths", "weighted_norm_L", "zero_driver", "zero_kernel",
]
