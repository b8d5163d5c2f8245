from .regression import PolynomialFit, fit_polynomial
from .solver import (AdjointPaths, FBSDEPaths, FeedbackPolicy, ForwardPaths, SolverConfig, TimeGrid,
                     brownian_noise, candidate_strategies, extra_sweep, picard_solve, simulate_forward,
                     solve_backward, solve_minor_control)
from .ode import MeanFieldTrajectories, mean_field_ode_solve

__all__ = [
    "PolynomialFit", "fit_polynomial", "AdjointPaths", "FBSDEPaths", "FeedbackPolicy", "ForwardPaths",
    "SolverConfig", "TimeGrid", "brownian_noise", "candidate_strategies", "extra_sweep", "picard_solve",
    "simulate_forward", "solve_backward", "solve_minor_control", "MeanFieldTrajectories",
    "mean_field_ode_solve",
]
