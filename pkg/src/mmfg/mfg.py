"""Outer fixed point on measure flows, decoupling fields, and the equilibrium bundle."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FixedPointError, PreconditionError
from .fbsde.regression import PolynomialFit, fit_polynomial
from .fbsde.solver import FBSDEPaths, SolverConfig, TimeGrid, brownian_noise, picard_solve, simulate_forward
from .hamiltonian import minimize_alpha
from .measure import MeasureFlow, flow_distance
from .model import LambdaSummary, ModelSpec, summarize_paths

BUNDLE_VERSION = "1.0"


@dataclass(frozen=True, eq=False)
class MFGSolution:
    equilibrium_flow: MeasureFlow
    alpha0_path: np.ndarray
    fbsde: FBSDEPaths
    fixed_point_residuals: tuple
    config: SolverConfig
    model: ModelSpec

    @property
    def outer_iterations(self) -> int:
        """Number of flow updates performed before the stopping test passed."""
        return len(self.fixed_point_residuals) - 1

    def alpha_feedback(self, fields: "DecouplingFields"):
        """Feedback (n, x, gamma) -> alpha through the fitted minor adjoint."""
        summaries = summarize_paths(self.equilibrium_flow.particles[:, :, : self.model.d],
                                    self.equilibrium_flow.particles[:, :, self.model.d:])
        return _feedback(self.model, fields, self.alpha0_path, summaries)


def _feedback(model, fields, alpha0, summaries):
    times = fields.times

    def alpha(n, x, g):
        x = np.asarray(x, float)
        g = np.asarray(g, float)
        yy = fields.theta_Y(n, x, g)
        return minimize_alpha(model, times[n], x, g, yy[..., : model.d], yy[..., model.d:],
                              alpha0[n], summaries[n])
    return alpha


def _mix(mu: MeasureFlow, induced: MeasureFlow, rho: float) -> MeasureFlow:
    return MeasureFlow(mu.grid, (1.0 - rho) * mu.particles + rho * induced.particles, mu.state_dim)


def uncontrolled_flow(model: ModelSpec, config: SolverConfig, noise=None) -> MeasureFlow:
    grid = config.grid(model.horizon)
    if noise is None:
        noise = brownian_noise(config.seed, config.particles, grid.M, model.m)
    a0 = np.broadcast_to(model.action_set0.project(np.zeros(model.k0)), (grid.M + 1, model.k0))
    a = model.action_set.project(np.zeros(model.k))
    return simulate_forward(model, grid, a0, a, noise).flow


def solve_mmmfg(model: ModelSpec, config: SolverConfig) -> MFGSolution:
    """Damped Picard on flows with an inner FBSDE solve per flow.

    The first update adopts the induced flow outright; later ones mix particle
    by particle with weight ``config.outer_damping`` on the induced flow.
    """
    grid = config.grid(model.horizon)
    noise = brownian_noise(config.seed, config.particles, grid.M, model.m)
    mu = uncontrolled_flow(model, config, noise)
    residuals = []
    init = None
    for j in range(config.outer_max_iter + 1):
        paths = picard_solve(model, config, mu, noise=noise, init=init)
        induced = paths.flow
        residuals.append(flow_distance(mu, induced))
        if residuals[-1] <= config.fp_tol:
            return MFGSolution(mu, paths.alpha0.copy(), paths, tuple(residuals), config, model)
        mu = induced if j == 0 else _mix(mu, induced, config.outer_damping)
        init = (paths.alpha0, paths.alpha, paths.P[0].mean(axis=0))
    raise FixedPointError(
        f"flow fixed point not reached in {config.outer_max_iter} updates "
        f"(last distance {residuals[-1]:.3e}, target {config.fp_tol:g})", residuals=residuals)


def fixed_point_certificate(solution: MFGSolution) -> dict:
    """Strategy change and flow distance after one more inner pass against the equilibrium flow."""
    model, config = solution.model, solution.config
    paths = picard_solve(model, config, solution.equilibrium_flow)
    old = solution.fbsde
    change = max(np.abs(paths.alpha0 - old.alpha0)[:-1].max(), np.abs(paths.alpha - old.alpha)[:-1].max())
    return {"strategy_change": float(change),
            "flow_change": flow_distance(solution.equilibrium_flow, paths.flow)}


# ---- decoupling fields -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DecouplingFields:
    times: np.ndarray
    degree: int
    P_fits: tuple
    Y_fits: tuple
    P_residuals: np.ndarray     # max abs in-sample residual per time
    Y_residuals: np.ndarray

    @staticmethod
    def _eval(fits, n, x, g):
        return fits[n](np.concatenate([np.asarray(x, float), np.asarray(g, float)], axis=-1))

    def theta_P(self, n: int, x, g) -> np.ndarray:
        return self._eval(self.P_fits, n, x, g)

    def theta_Y(self, n: int, x, g) -> np.ndarray:
        return self._eval(self.Y_fits, n, x, g)

    def to_dict(self) -> dict:
        return {"degree": int(self.degree),
                "theta_P": [f.to_dict() for f in self.P_fits],
                "theta_Y": [f.to_dict() for f in self.Y_fits],
                "P_residuals": self.P_residuals.tolist(), "Y_residuals": self.Y_residuals.tolist()}

    @classmethod
    def from_dict(cls, d: dict, times) -> "DecouplingFields":
        return cls(np.asarray(times, float), int(d["degree"]),
                   tuple(PolynomialFit.from_dict(f) for f in d["theta_P"]),
                   tuple(PolynomialFit.from_dict(f) for f in d["theta_Y"]),
                   np.asarray(d["P_residuals"], float), np.asarray(d["Y_residuals"], float))


def fit_decoupling_fields(solution: MFGSolution, degree: Optional[int] = None) -> DecouplingFields:
    paths = solution.fbsde
    degree = solution.config.degree if degree is None else int(degree)
    P_fits, Y_fits, P_res, Y_res = [], [], [], []
    for n in range(paths.grid.M + 1):
        z = np.concatenate([paths.x[n], paths.gamma[n]], axis=1)
        for fits, res, target in ((P_fits, P_res, np.concatenate([paths.P[n], paths.Pg[n]], axis=1)),
                                  (Y_fits, Y_res, np.concatenate([paths.Y[n], paths.Yg[n]], axis=1))):
            fit, fitted, _ = fit_polynomial(z, target, degree)
            fits.append(fit)
            res.append(float(np.abs(fitted - target).max()))
    return DecouplingFields(paths.grid.times.copy(), degree, tuple(P_fits), tuple(Y_fits),
                            np.asarray(P_res), np.asarray(Y_res))


# ---- export -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EquilibriumBundle:
    model: dict                # {"name": ..., "params": {...}}
    config: dict
    grid: TimeGrid
    alpha0: np.ndarray         # (M+1, k0)
    fields: DecouplingFields
    flow_summaries: tuple      # LambdaSummary per grid time
    spec_version: str = BUNDLE_VERSION

    def alpha0_at(self, t):
        """Major action at arbitrary times by linear interpolation on the grid."""
        return np.interp(t, self.grid.times, self.alpha0[:, 0])

    def feedback(self, model: ModelSpec):
        return _feedback(model, self.fields, self.alpha0, self.flow_summaries)

    def to_dict(self) -> dict:
        return {
            "spec_version": self.spec_version,
            "model": self.model,
            "config": self.config,
            "grid": {"t_min": self.grid.t_min, "T": self.grid.T, "M": self.grid.M},
            "alpha0": self.alpha0.tolist(),
            **self.fields.to_dict(),
            "flow_summaries": [s.to_dict() for s in self.flow_summaries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EquilibriumBundle":
        if d.get("spec_version") != BUNDLE_VERSION:
            raise PreconditionError(f"unsupported bundle version {d.get('spec_version')!r}")
        grid = TimeGrid(float(d["grid"]["t_min"]), float(d["grid"]["T"]), int(d["grid"]["M"]))
        return cls(d["model"], d["config"], grid, np.asarray(d["alpha0"], float).reshape(grid.M + 1, -1),
                   DecouplingFields.from_dict(d, grid.times),
                   tuple(LambdaSummary.from_dict(s) for s in d["flow_summaries"]), d["spec_version"])

    @classmethod
    def from_json(cls, text: str) -> "EquilibriumBundle":
        return cls.from_dict(json.loads(text))


def export_equilibrium(solution: MFGSolution, fields: DecouplingFields,
                       model_params: Optional[dict] = None) -> EquilibriumBundle:
    model = solution.model
    flow = solution.equilibrium_flow
    summaries = summarize_paths(flow.particles[:, :, : model.d], flow.particles[:, :, model.d:])
    params = dict(model.params if model_params is None else model_params)
    return EquilibriumBundle({"name": model.name, "params": params}, solution.config.to_dict(),
                             solution.fbsde.grid, solution.alpha0_path.copy(), fields, tuple(summaries))
