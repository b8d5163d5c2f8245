"""Particle McKean-Vlasov FBSDE solver on the enlarged state (X, gamma).

Strategies are stored per particle along the frozen Brownian paths (open loop
on common random numbers); the Picard map is therefore deterministic given the
seed and the stopping rule compares like with like.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Union

import numpy as np

from ..errors import DivergenceError, NonConvergenceError, PreconditionError
from ..hamiltonian import minimize_alpha, minimize_alpha0
from ..measure import MeasureFlow, ParticleEnsemble
from ..model import LambdaSummary, ModelSpec, summarize, summarize_paths
from .regression import fit_polynomial


@dataclass(frozen=True)
class TimeGrid:
    t_min: float
    T: float
    M: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise PreconditionError(f"grid needs M >= 1 steps, got {self.M}")
        if self.t_min < 0 or not self.T > self.t_min:
            raise PreconditionError(f"need 0 <= t_min < T, got t_min={self.t_min}, T={self.T}")

    @property
    def dt(self) -> float:
        return (self.T - self.t_min) / self.M

    @property
    def times(self) -> np.ndarray:
        t = self.t_min + self.dt * np.arange(self.M + 1)
        t[-1] = self.T
        return t


@dataclass(frozen=True)
class SolverConfig:
    particles: int = 1000
    seed: int = 0
    max_iter: int = 50
    tol: float = 1e-3
    damping: float = 0.5
    degree: int = 2
    t_min: float = 0.01
    steps: int = 200
    # outer fixed point
    fp_tol: float = 5e-2
    outer_damping: float = 0.5
    outer_max_iter: int = 30

    def __post_init__(self):
        bad = []
        if int(self.particles) != self.particles or self.particles < 2:
            bad.append("particles")
        if int(self.seed) != self.seed or self.seed < 0:
            bad.append("seed")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            bad.append("max_iter")
        if not self.tol > 0:
            bad.append("tol")
        if not 0 < self.damping <= 1:
            bad.append("damping")
        if int(self.degree) != self.degree or self.degree < 0:
            bad.append("degree")
        if not self.t_min >= 0:
            bad.append("t_min")
        if int(self.steps) != self.steps or self.steps < 1:
            bad.append("steps")
        if not self.fp_tol > 0:
            bad.append("fp_tol")
        if not 0 < self.outer_damping <= 1:
            bad.append("outer_damping")
        if int(self.outer_max_iter) != self.outer_max_iter or self.outer_max_iter < 1:
            bad.append("outer_max_iter")
        if bad:
            raise PreconditionError(f"invalid solver settings: {bad}")

    def grid(self, horizon: float) -> TimeGrid:
        return TimeGrid(self.t_min, horizon, self.steps)

    def to_dict(self) -> dict:
        return asdict(self)


def brownian_noise(seed: int, count: int, steps: int, dim: int, first: int = 0) -> np.ndarray:
    """Standard normals (steps + 1, count, dim), one stream per particle index.

    Row 0 feeds the initial law, rows 1.. the Brownian increments. Each particle
    draws from ``default_rng([seed, first + i])`` so its path does not depend on
    how many other particles there are.
    """
    out = np.empty((steps + 1, count, dim))
    for i in range(count):
        rng = np.random.default_rng([int(seed), int(first + i)])
        out[:, i, :] = rng.standard_normal((steps + 1, dim))
    return out


@dataclass
class ForwardPaths:
    grid: TimeGrid
    x: np.ndarray        # (M+1, N, d)
    gamma: np.ndarray    # (M+1, N, k)

    @property
    def flow(self) -> MeasureFlow:
        return MeasureFlow.from_paths(self.grid.times, self.x, self.gamma)


def _alpha_at(alpha, n, t, x, g, lam, shape):
    if callable(alpha):
        a = np.asarray(alpha(t, x, g, lam), float)
    else:
        a = np.asarray(alpha, float)[n]
    return np.broadcast_to(a, shape)


def simulate_forward(model: ModelSpec, grid: TimeGrid, alpha0, alpha, noise: np.ndarray,
                     *, mean_P=None, minor_flow: Optional[list] = None) -> ForwardPaths:
    """Euler-Maruyama for X and exact Euler for gamma.

    ``alpha0`` is (M+1, k0); ``alpha`` is (M+1, N, k) or a callable
    ``(t, x, gamma, lam) -> (N, k)``. Drift summaries come from the current
    ensemble unless ``minor_flow`` (per-time LambdaSummary list) is given.
    ``noise`` comes from ``brownian_noise``.
    """
    times = grid.times
    M, dt = grid.M, grid.dt
    N = noise.shape[1]
    alpha0 = np.asarray(alpha0, float).reshape(M + 1, model.k0)
    if not np.all(np.isfinite(alpha0)):
        raise PreconditionError("alpha0 path has non-finite entries")
    xm, g_init, x_std = model.initial_state(grid.t_min, mean_P)
    x = np.empty((M + 1, N, model.d))
    g = np.empty((M + 1, N, model.k))
    x[0] = xm + x_std * noise[0, :, : model.d]
    g[0] = g_init
    if not callable(alpha):
        alpha = np.broadcast_to(np.asarray(alpha, float), (M + 1, N, model.k))
    for n in range(M):
        t = times[n]
        lam = minor_flow[n] if minor_flow is not None else summarize(ParticleEnsemble.from_parts(x[n], g[n]))
        a = _alpha_at(alpha, n, t, x[n], g[n], lam, (N, model.k))
        b = model.drift(t, x[n], g[n], alpha0[n], a, lam)
        s = model.vol(t, x[n], g[n])
        x[n + 1] = x[n] + b * dt + np.einsum("ndm,nm->nd", s, noise[n + 1], optimize=False) * np.sqrt(dt)
        g[n + 1] = g[n] + a * dt
        if not (np.all(np.isfinite(x[n + 1])) and np.all(np.isfinite(g[n + 1]))):
            raise DivergenceError(f"forward state became non-finite at step {n + 1} (t={times[n + 1]:.4g})",
                                  step=n + 1)
    return ForwardPaths(grid, x, g)


@dataclass
class AdjointPaths:
    P: np.ndarray
    Pg: np.ndarray
    Y: np.ndarray
    Yg: np.ndarray
    r2: np.ndarray       # (M,) mean R^2 of the regressions at each backward step


def terminal_values(model: ModelSpec, x, g):
    ens = ParticleEnsemble.from_parts(x, g)
    lam = summarize(ens)
    dg0 = np.asarray(model.g0_dlam(ens), float)
    return (dg0[:, : model.d], dg0[:, model.d:],
            np.asarray(model.g_dx(x, g, lam), float), np.asarray(model.g_dg(x, g, lam), float))


def major_generator(model, t, x, g, P, Pg, a0, a, lam, ens):
    """(d/dx, d/dgamma) of H0^R plus the mean-field term, per particle."""
    bx = model.drift_dx(t, x, g, a0, a, lam)
    bg = model.drift_dg(t, x, g, a0, a, lam)
    dl = np.asarray(model.f0_dlam(t, a0, ens), float)
    if model.drift_dlam_adj is not None:
        dl = dl + model.drift_dlam_adj(t, x, g, a0, a, P, ens)
    gx = np.einsum("ndj,nd->nj", bx, P, optimize=False) + dl[:, : model.d]
    gg = np.einsum("ndj,nd->nj", bg, P, optimize=False) + dl[:, model.d:]
    return gx, gg


def minor_generator(model, t, x, g, Y, Yg, a0, a, lam):
    bx = model.drift_dx(t, x, g, a0, a, lam)
    bg = model.drift_dg(t, x, g, a0, a, lam)
    gx = np.einsum("ndj,nd->nj", bx, Y, optimize=False) + model.f_dx(t, x, g, a0, a, lam)
    gg = np.einsum("ndj,nd->nj", bg, Y, optimize=False) + model.f_dg(t, x, g, a0, a, lam)
    return gx, gg


def solve_backward(model: ModelSpec, fwd: ForwardPaths, alpha0, alpha, degree: int = 2,
                   *, minor_flow: Optional[list] = None, major: bool = True) -> AdjointPaths:
    """Explicit backward Euler with regression for E[. | X_n, gamma_n].

    Major terms read the law of the current ensemble; minor terms read
    ``minor_flow`` when given. ``major=False`` skips (P, Pg) (left at zero).
    """
    grid = fwd.grid
    M, dt, times = grid.M, grid.dt, grid.times
    x, g = fwd.x, fwd.gamma
    N, d, k = x.shape[1], model.d, model.k
    alpha0 = np.asarray(alpha0, float).reshape(M + 1, model.k0)
    alpha = np.broadcast_to(np.asarray(alpha, float), (M + 1, N, k))
    P = np.zeros((M + 1, N, d))
    Pg = np.zeros((M + 1, N, k))
    Y = np.zeros((M + 1, N, d))
    Yg = np.zeros((M + 1, N, k))
    tP, tPg, tY, tYg = terminal_values(model, x[M], g[M])
    if major:
        P[M], Pg[M] = tP, tPg
    Y[M], Yg[M] = tY, tYg
    r2 = np.ones(M)
    for n in range(M - 1, -1, -1):
        t = times[n]
        ens = ParticleEnsemble.from_parts(x[n], g[n])
        lam_major = summarize(ens)
        lam_minor = minor_flow[n] if minor_flow is not None else lam_major
        a0, a = alpha0[n], alpha[n]
        cols = []
        yx, yg = minor_generator(model, t, x[n], g[n], Y[n + 1], Yg[n + 1], a0, a, lam_minor)
        cols += [Y[n + 1] + dt * yx, Yg[n + 1] + dt * yg]
        if major:
            px, pg = major_generator(model, t, x[n], g[n], P[n + 1], Pg[n + 1], a0, a, lam_major, ens)
            cols += [P[n + 1] + dt * px, Pg[n + 1] + dt * pg]
        target = np.concatenate(cols, axis=1)
        _, fitted, r2[n] = fit_polynomial(np.concatenate([x[n], g[n]], axis=1), target, degree)
        Y[n], Yg[n] = fitted[:, :d], fitted[:, d:d + k]
        if major:
            P[n], Pg[n] = fitted[:, d + k:2 * d + k], fitted[:, 2 * d + k:]
        if not np.all(np.isfinite(fitted)):
            raise DivergenceError(f"adjoint became non-finite at step {n}", step=n)
    return AdjointPaths(P, Pg, Y, Yg, r2)


@dataclass
class FBSDEPaths:
    grid: TimeGrid
    x: np.ndarray
    gamma: np.ndarray
    P: np.ndarray
    Pg: np.ndarray
    Y: np.ndarray
    Yg: np.ndarray
    alpha0: np.ndarray          # (M+1, k0)
    alpha: np.ndarray           # (M+1, N, k)
    r2: np.ndarray
    residuals: list = field(default_factory=list)
    minor_flow: Optional[list] = None

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def flow(self) -> MeasureFlow:
        return MeasureFlow.from_paths(self.grid.times, self.x, self.gamma)

    def minor_summary(self, n: int) -> LambdaSummary:
        if self.minor_flow is not None:
            return self.minor_flow[n]
        return summarize(ParticleEnsemble.from_parts(self.x[n], self.gamma[n]))

    def means(self) -> dict:
        """Per-time ensemble means of every stored process (first coordinate)."""
        return {
            "t": self.grid.times,
            "alpha0": self.alpha0[:, 0],
            "mean_x": self.x[:, :, 0].mean(axis=1),
            "mean_gamma": self.gamma[:, :, 0].mean(axis=1),
            "mean_P": self.P[:, :, 0].mean(axis=1),
            "mean_Pgrave": self.Pg[:, :, 0].mean(axis=1),
            "mean_Y": self.Y[:, :, 0].mean(axis=1),
            "mean_Ygrave": self.Yg[:, :, 0].mean(axis=1),
        }


def _check_terminal(model, paths: FBSDEPaths):
    M = paths.grid.M
    tP, tPg, tY, tYg = terminal_values(model, paths.x[M], paths.gamma[M])
    ok = (np.array_equal(paths.P[M], tP) and np.array_equal(paths.Pg[M], tPg)
          and np.array_equal(paths.Y[M], tY) and np.array_equal(paths.Yg[M], tYg))
    assert ok, "terminal conditions violated"


def candidate_strategies(model: ModelSpec, fwd: ForwardPaths, adj: AdjointPaths, alpha, minor_flow=None):
    """Pointwise minimisers of the reduced Hamiltonians along the current paths.

    alpha0 at time n minimises the ensemble average given the current alpha;
    alpha then minimises the minor Hamiltonian given the new alpha0.
    """
    grid = fwd.grid
    times = grid.times
    N = fwd.x.shape[1]
    a0_new = np.empty((grid.M + 1, model.k0))
    a_new = np.empty((grid.M + 1, N, model.k))
    alpha = np.broadcast_to(np.asarray(alpha, float), (grid.M + 1, N, model.k))
    for n in range(grid.M + 1):
        t = times[n]
        x, g = fwd.x[n], fwd.gamma[n]
        lam = summarize(ParticleEnsemble.from_parts(x, g))
        lam_minor = minor_flow[n] if minor_flow is not None else lam
        a0_new[n] = minimize_alpha0(model, t, x, g, adj.P[n], adj.Pg[n], alpha[n], lam)
        a_new[n] = minimize_alpha(model, t, x, g, adj.Y[n], adj.Yg[n], a0_new[n], lam_minor)
    return a0_new, a_new


def _sup_change(a0_new, a_new, a0, a):
    # the control on the last grid point never acts
    d0 = np.abs(a0_new[:-1] - a0[:-1]).max(initial=0.0)
    d1 = np.abs(a_new[:-1] - a[:-1]).max(initial=0.0)
    return float(max(d0, d1))


def _flow_summaries(mu_flow):
    if mu_flow is None:
        return None
    if isinstance(mu_flow, MeasureFlow):
        return [summarize(mu_flow[n]) for n in range(len(mu_flow))]
    return list(mu_flow)


def picard_solve(model: ModelSpec, config: SolverConfig, mu_flow: Union[MeasureFlow, list, None] = None,
                 *, noise: Optional[np.ndarray] = None, init=None, raise_on_failure: bool = True) -> FBSDEPaths:
    """Damped Picard iteration on strategies: minimise, simulate, solve backward.

    ``mu_flow`` freezes the law read by the minor player's coefficients (the
    major player always reads the current ensemble). ``init`` is an optional
    (alpha0, alpha) warm start; otherwise a bootstrap sweep from the projected
    zero strategies supplies it.
    """
    grid = config.grid(model.horizon)
    if isinstance(mu_flow, MeasureFlow) and not np.allclose(mu_flow.grid, grid.times, rtol=0, atol=1e-12):
        raise PreconditionError("measure flow lives on a different grid than the solver")
    minor_flow = _flow_summaries(mu_flow) if model.minor_reads_flow else None
    if noise is None:
        noise = brownian_noise(config.seed, config.particles, grid.M, model.m)
    N = noise.shape[1]
    rho = config.damping

    def sweep(a0, a, mean_P):
        fwd = simulate_forward(model, grid, a0, a, noise, mean_P=mean_P, minor_flow=minor_flow)
        adj = solve_backward(model, fwd, a0, a, config.degree, minor_flow=minor_flow)
        return fwd, adj

    if init is None:
        a0 = np.broadcast_to(model.action_set0.project(np.zeros(model.k0)), (grid.M + 1, model.k0)).copy()
        a = np.broadcast_to(model.action_set.project(np.zeros(model.k)), (grid.M + 1, N, model.k)).copy()
        fwd, adj = sweep(a0, a, None)
        a0, a = candidate_strategies(model, fwd, adj, a, minor_flow)
        mean_P = adj.P[0].mean(axis=0)
    else:
        a0 = np.asarray(init[0], float).reshape(grid.M + 1, model.k0).copy()
        a = np.broadcast_to(np.asarray(init[1], float), (grid.M + 1, N, model.k)).copy()
        mean_P = None if len(init) < 3 else init[2]
    residuals = []
    for _ in range(config.max_iter):
        fwd, adj = sweep(a0, a, mean_P)
        a0_new, a_new = candidate_strategies(model, fwd, adj, a, minor_flow)
        res = _sup_change(a0_new, a_new, a0, a)
        residuals.append(res)
        if res <= config.tol:
            paths = FBSDEPaths(grid, fwd.x, fwd.gamma, adj.P, adj.Pg, adj.Y, adj.Yg,
                               a0, a, adj.r2, residuals, minor_flow)
            _check_terminal(model, paths)
            return paths
        a0 = a0 + rho * (a0_new - a0)
        a = a + rho * (a_new - a)
        mean_P = adj.P[0].mean(axis=0)
    if not raise_on_failure:
        return FBSDEPaths(grid, fwd.x, fwd.gamma, adj.P, adj.Pg, adj.Y, adj.Yg, a0, a, adj.r2, residuals, minor_flow)
    raise NonConvergenceError(
        f"Picard iteration did not reach tol={config.tol:g} in {config.max_iter} iterations "
        f"(last residual {residuals[-1]:.3e})", residuals=residuals)


def extra_sweep(model: ModelSpec, config: SolverConfig, paths: FBSDEPaths, noise: Optional[np.ndarray] = None):
    """One more (minimise, simulate, solve) pass from a returned solution.

    Returns the sup-norm strategy change and the induced forward paths.
    """
    grid = paths.grid
    if noise is None:
        noise = brownian_noise(config.seed, paths.x.shape[1], grid.M, model.m)
    a0_new, a_new = candidate_strategies(
        model, ForwardPaths(grid, paths.x, paths.gamma),
        AdjointPaths(paths.P, paths.Pg, paths.Y, paths.Yg, paths.r2), paths.alpha, paths.minor_flow)
    fwd = simulate_forward(model, grid, a0_new, a_new, noise, mean_P=paths.P[0].mean(axis=0),
                           minor_flow=paths.minor_flow)
    return _sup_change(a0_new, a_new, paths.alpha0, paths.alpha), fwd


# ---- single-agent control against a frozen environment ----------------------

@dataclass
class FeedbackPolicy:
    """alpha(t_n, x, gamma) given by per-time polynomial fits."""

    times: np.ndarray
    fits: list

    def __call__(self, n: int, x, g):
        z = np.concatenate([np.asarray(x, float), np.asarray(g, float)], axis=-1)
        return self.fits[n](z)


def solve_minor_control(model: ModelSpec, grid: TimeGrid, alpha0, summaries: list, *,
                        particles: int = 2000, seed: int = 0, degree: int = 2, max_iter: int = 50,
                        tol: float = 1e-4, damping: float = 1.0, x_init=None, gamma_init=None) -> FeedbackPolicy:
    """Best response of one minor player to a frozen major path and frozen law summaries.

    The player's own state starts at ``(x_init, gamma_init)`` (one point, or
    the model's initial law if omitted). Solved by Picard on the player's
    strategy; the result is regressed onto (x, gamma) at each time.
    """
    alpha0 = np.asarray(alpha0, float).reshape(grid.M + 1, model.k0)
    noise = brownian_noise(seed, particles, grid.M, model.m)
    M, dt, times = grid.M, grid.dt, grid.times

    def forward(a):
        x = np.empty((M + 1, particles, model.d))
        g = np.empty((M + 1, particles, model.k))
        if x_init is None:
            xm, g0, sd = model.initial_state(grid.t_min, None)
            x[0] = xm + sd * noise[0, :, : model.d]
            g[0] = g0
        else:
            x[0] = np.asarray(x_init, float).reshape(model.d)
            g[0] = np.asarray(gamma_init, float).reshape(model.k)
        for n in range(M):
            t = times[n]
            b = model.drift(t, x[n], g[n], alpha0[n], a[n], summaries[n])
            s = model.vol(t, x[n], g[n])
            x[n + 1] = x[n] + b * dt + np.einsum("ndm,nm->nd", s, noise[n + 1], optimize=False) * np.sqrt(dt)
            g[n + 1] = g[n] + a[n] * dt
            if not np.all(np.isfinite(x[n + 1])):
                raise DivergenceError(f"best-response state non-finite at step {n + 1}", step=n + 1)
        return ForwardPaths(grid, x, g)

    a = np.zeros((M + 1, particles, model.k))
    a = model.action_set.project(a)
    for it in range(max_iter):
        fwd = forward(a)
        adj = solve_backward(model, fwd, alpha0, a, degree, minor_flow=summaries, major=False)
        a_new = np.stack([minimize_alpha(model, times[n], fwd.x[n], fwd.gamma[n], adj.Y[n], adj.Yg[n],
                                         alpha0[n], summaries[n]) for n in range(M + 1)])
        res = np.abs(a_new[:-1] - a[:-1]).max()
        a = a + damping * (a_new - a)
        if res <= tol:
            break
    else:
        raise NonConvergenceError(f"best-response iteration stalled (residual {res:.3e})", residuals=[res])
    fits = [fit_polynomial(np.concatenate([fwd.x[n], fwd.gamma[n]], axis=1), a[n], degree)[0]
            for n in range(M + 1)]
    return FeedbackPolicy(times, fits)
