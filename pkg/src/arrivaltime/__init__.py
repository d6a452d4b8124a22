"""Arrival time of mean convex level set flow via a doubly regularized Dirichlet problem."""

from .config import ConfigError, RunConfig, load_config
from .grid import ScalarField, build_grid
from .pde import RegParams, jacobian, residual
from .solver import Schedule, continuation_kappa, epsilon_sweep, sigma_sweep, solve_fixed

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "ScalarField",
    "build_grid",
    "RegParams",
    "residual",
    "jacobian",
    "Schedule",
    "solve_fixed",
    "continuation_kappa",
    "sigma_sweep",
    "epsilon_sweep",
]
