"""Wasserstein gradient flows for free energies with difference-of-convex potentials."""

from .flow import BaseDistribution, FlowState, load_state, save_state
from .icnn import ConvexityError, ICNNArchitecture, ICNNFunction
from .jko import DivergenceError, JKOConfig, RegularizerSpec
from .potentials import DCPotential, build_potential
from .transport import Coupling, EmpiricalMeasure

__all__ = [
    "BaseDistribution",
    "ConvexityError",
    "Coupling",
    "DCPotential",
    "DivergenceError",
    "EmpiricalMeasure",
    "FlowState",
    "ICNNArchitecture",
    "ICNNFunction",
    "JKOConfig",
    "RegularizerSpec",
    "build_potential",
    "load_state",
    "save_state",
]
