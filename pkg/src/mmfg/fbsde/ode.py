"""Deterministic reduction for models whose adjoints are determined by the means.

The FBSDE collapses to an ODE two-point problem for (E[X], E[gamma]) forward
and (E[P], E[Pg], E[Y], E[Yg]) backward. We integrate with classical RK4 and
shoot on the adjoint values at t_min.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ..errors import ConfigurationError, NonConvergenceError, SingularMeanError
from ..hamiltonian import minimize_alpha, minimize_alpha0
from ..measure import ParticleEnsemble
from ..model import ModelSpec, summarize
from .solver import TimeGrid, major_generator, minor_generator, terminal_values

SUBSTEPS = 4


@dataclass
class MeanFieldTrajectories:
    t: np.ndarray
    mean_x: np.ndarray
    mean_gamma: np.ndarray
    mean_P: np.ndarray
    mean_Pgrave: np.ndarray
    mean_Y: np.ndarray
    mean_Ygrave: np.ndarray
    alpha0: np.ndarray
    alpha: np.ndarray
    shooting_residual: float

    def as_columns(self) -> dict:
        return {"t": self.t, "alpha0": self.alpha0, "alpha": self.alpha, "mean_x": self.mean_x,
                "mean_gamma": self.mean_gamma, "mean_P": self.mean_P, "mean_Pgrave": self.mean_Pgrave,
                "mean_Y": self.mean_Y, "mean_Ygrave": self.mean_Ygrave}


def _split(z, d, k):
    i = np.cumsum([d, k, d, k, d])
    return np.split(z, i)


def _controls(model, t, x, g, P, Pg, Y, Yg):
    x, g = x[None], g[None]
    lam = summarize(ParticleEnsemble.from_parts(x, g))
    a0 = minimize_alpha0(model, t, x, g, P[None], Pg[None], np.zeros_like(g), lam, check=False)
    a = minimize_alpha(model, t, x, g, Y[None], Yg[None], a0, lam)
    return a0, a, lam


def _field(model: ModelSpec, t, z):
    d, k = model.d, model.k
    x, g, P, Pg, Y, Yg = _split(z, d, k)
    # only coefficients that divide by a mean raise; reading E[gamma] is fine
    try:
        a0, a, lam = _controls(model, t, x, g, P, Pg, Y, Yg)
        xs, gs = x[None], g[None]
        ens = ParticleEnsemble.from_parts(xs, gs)
        b = model.drift(t, xs, gs, a0, a, lam)[0]
        px, pg = major_generator(model, t, xs, gs, P[None], Pg[None], a0, a, lam, ens)
    except SingularMeanError as exc:
        raise SingularMeanError(f"{exc} at t={t:.4g}") from None
    yx, yg = minor_generator(model, t, xs, gs, Y[None], Yg[None], a0, a, lam)
    return np.concatenate([b, a[0], -px[0], -pg[0], -yx[0], -yg[0]])


def _integrate(model, grid: TimeGrid, z0, substeps):
    times = grid.times
    out = np.empty((grid.M + 1, z0.size))
    out[0] = z = z0
    for n in range(grid.M):
        h = (times[n + 1] - times[n]) / substeps
        t = times[n]
        for _ in range(substeps):
            k1 = _field(model, t, z)
            k2 = _field(model, t + h / 2, z + h / 2 * k1)
            k3 = _field(model, t + h / 2, z + h / 2 * k2)
            k4 = _field(model, t + h, z + h * k3)
            z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        if not np.all(np.isfinite(z)):
            raise NonConvergenceError(f"mean-field ODE blew up before t={times[n + 1]:.4g}", residuals=[])
        out[n + 1] = z
    return out


def mean_field_ode_solve(model: ModelSpec, grid: TimeGrid, *, substeps: int = SUBSTEPS,
                         xtol: float = 1e-12) -> MeanFieldTrajectories:
    """Mean trajectories and the major action on ``grid``.

    The state at ``t_min`` comes from the model's startup (which may depend on
    E[P] there), so the unknowns of the shooting problem are the adjoint means
    at ``t_min``.
    """
    if not model.mean_reducible:
        raise ConfigurationError(f"model {model.name!r} does not reduce to a mean-field ODE")
    d, k = model.d, model.k

    def initial(adj0):
        P0 = adj0[:d]
        xm, g0, _ = model.initial_state(grid.t_min, P0)
        return np.concatenate([xm, g0, adj0])

    def terminal_gap(adj0):
        z = _integrate(model, grid, initial(adj0), substeps)[-1]
        x, g, P, Pg, Y, Yg = _split(z, d, k)
        tP, tPg, tY, tYg = terminal_values(model, x[None], g[None])
        return np.concatenate([P - tP[0], Pg - tPg[0], Y - tY[0], Yg - tYg[0]])

    # initial guess: terminal adjoints at the uncontrolled start
    xm, g0, _ = model.initial_state(grid.t_min, None)
    try:
        model.convexity_alpha0(summarize(ParticleEnsemble.from_parts(xm[None], g0[None])))
    except SingularMeanError as exc:
        raise SingularMeanError(f"{exc} at t_min={grid.t_min:g}; start later") from None
    tP, tPg, tY, tYg = terminal_values(model, xm[None], g0[None])
    guess = np.concatenate([tP[0], tPg[0], tY[0], tYg[0]])
    sol = optimize.root(terminal_gap, guess, method="hybr", options={"xtol": xtol})
    gap = float(np.abs(terminal_gap(sol.x)).max())
    if not np.isfinite(gap) or gap > 1e-8:
        raise NonConvergenceError(f"shooting on the adjoint means failed (terminal gap {gap:.3e})",
                                  residuals=[gap])
    path = _integrate(model, grid, initial(sol.x), substeps)
    times = grid.times
    a0 = np.empty(grid.M + 1)
    a = np.empty(grid.M + 1)
    for n, t in enumerate(times):
        x, g, P, Pg, Y, Yg = _split(path[n], d, k)
        c0, c, _ = _controls(model, t, x, g, P, Pg, Y, Yg)
        a0[n] = c0[0]
        a[n] = c[0, 0]
    cols = _split(path.T, d, k)
    return MeanFieldTrajectories(times, cols[0][0], cols[1][0], cols[2][0], cols[3][0], cols[4][0], cols[5][0],
                                 a0, a, gap)
