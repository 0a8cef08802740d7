"""Zero-order robust MPC for reference tracking with a differential-drive robot."""

from ._backend import BACKEND
from .model import DiffDriveParams, DiscretizationParams, integrate_step
from .ocp import Bounds, Obstacle, OcpSpec, ReferenceTrajectory, Weights, reference_window
from .oracle import solve_exact_robust, solve_nominal
from .tube import FeedbackGain, NoiseModel, ScalarTube, feedback_gain
from .zoro_solver import (OcpSolution, TubeModel, ZoroSettings, disregarded_gradient,
                          zoro_solve_to_convergence, zoro_step)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Bounds", "DiffDriveParams", "DiscretizationParams", "FeedbackGain", "NoiseModel",
    "Obstacle", "OcpSolution", "OcpSpec", "ReferenceTrajectory", "ScalarTube", "TubeModel",
    "Weights", "ZoroSettings", "disregarded_gradient", "feedback_gain", "integrate_step",
    "reference_window", "solve_exact_robust", "solve_nominal", "zoro_solve_to_convergence",
    "zoro_step",
]
