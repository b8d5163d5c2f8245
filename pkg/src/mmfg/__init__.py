"""Major/minor mean field games solved through the stochastic maximum principle."""
from .errors import *  # noqa: F401,F403
from .measure import MeasureFlow, ParticleEnsemble, flow_distance
from .model import LambdaSummary, ModelSpec, make_model
from .fbsde import SolverConfig, TimeGrid, mean_field_ode_solve, picard_solve
from .mfg import EquilibriumBundle, MFGSolution, export_equilibrium, fit_decoupling_fields, solve_mmmfg
from .nplayer import FiniteGameConfig, NashGapReport, estimate_eps_nash, simulate_finite_game

__version__ = "0.1.0"
