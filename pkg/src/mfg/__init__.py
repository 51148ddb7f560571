"""Numerics for the zero-sum game between a major player and N collectively
acting minor agents: forward particle systems and their conditional
McKean-Vlasov limit, saddle-point Hamiltonians, regression BSDE solvers,
the limit mean-field game, and an experiment harness for the convergence
rates."""

from .model import (
    ConfigError,
    ModelParams,
    RandomStream,
    Scenario,
    ValidationReport,
    epsilon_n,
    load_scenario,
    validate_assumptions,
)

__all__ = [
    "ConfigError",
    "ModelParams",
    "RandomStream",
    "Scenario",
    "ValidationReport",
    "epsilon_n",
    "load_scenario",
    "validate_assumptions",
]

__version__ = "0.1.0"
