"""Constrained-LQR control via convex piecewise-quadratic value approximation.

Pipeline: exact value samples from finite-horizon MPC, a convex PWQ neural
approximator of the optimal value function, a certified one-step
dynamic-programming controller, and an offline stability certifier.
"""

from . import certifier, controller, datagen, harness, model, mpc, polytope, pwq_net, qp, riccati
from .controller import Controller
from .harness import ExperimentConfig, preset
from .model import LtiSystem, Polyhedron, ProblemInstance, validate
from .pwq_net import PwqNetwork, TrainConfig
from .riccati import solve_dare

__all__ = [
    "certifier", "controller", "datagen", "harness", "model", "mpc", "polytope",
    "pwq_net", "qp", "riccati", "Controller", "ExperimentConfig", "preset",
    "LtiSystem", "Polyhedron", "ProblemInstance", "validate", "PwqNetwork",
    "TrainConfig", "solve_dare",
]
