"""Reduced Hamiltonians, their minimisers, and the two-level necessary-condition check."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import OptimizationError, SeparabilityError, SingularControlError
from .measure import MEAN_FLOOR, ParticleEnsemble
from .model import LambdaSummary, ModelSpec, summarize

ARMIJO_C = 1e-4
SHRINK = 0.5
GRAD_TOL = 1e-8
MAX_ITERS = 500
VERIFY_TOL = 1e-6


@dataclass(frozen=True)
class AdjointState:
    """Adjoints on the enlarged state: major (P, Pg) and minor (Y, Yg); each (..., dim)."""

    P: np.ndarray
    Pg: np.ndarray
    Y: np.ndarray
    Yg: np.ndarray

    def __post_init__(self):
        for name in ("P", "Pg", "Y", "Yg"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(v)):
                raise ValueError(f"adjoint {name} has non-finite entries")
            object.__setattr__(self, name, v)


def _dot(a, b):
    return np.sum(np.asarray(a, float) * np.asarray(b, float), axis=-1)


def eval_H0R(model: ModelSpec, t, x, gamma, adjoint: AdjointState, alpha0, alpha, lam: LambdaSummary):
    """b . P + alpha . Pg + f0, one value per row of ``x``."""
    lam.require(model.reads["major"])
    b = model.drift(t, x, gamma, alpha0, alpha, lam)
    return _dot(b, adjoint.P) + _dot(alpha, adjoint.Pg) + model.f0(t, alpha0, lam)


def eval_HR(model: ModelSpec, t, x, gamma, adjoint: AdjointState, alpha0, alpha, lam: LambdaSummary):
    """b . Y + alpha . Yg + f, one value per row of ``x``."""
    lam.require(model.reads["minor"])
    b = model.drift(t, x, gamma, alpha0, alpha, lam)
    return _dot(b, adjoint.Y) + _dot(alpha, adjoint.Yg) + model.f(t, x, gamma, alpha0, alpha, lam)


def grad_alpha0_avg_H0R(model, t, x, gamma, P, alpha0, alpha, lam):
    db = model.drift_da0(t, x, gamma, alpha0, alpha, lam)          # (N, d, k0)
    return np.einsum("ndk,nd->nk", db, P).mean(axis=0) + model.f0_da0(t, alpha0, lam)


def grad_alpha_HR(model, t, x, gamma, Y, Yg, alpha0, alpha, lam):
    db = model.drift_da(t, x, gamma, alpha0, alpha, lam)           # (N, d, k)
    return np.einsum("ndk,nd->nk", db, Y) + Yg + model.f_da(t, x, gamma, alpha0, alpha, lam)


def projected_gradient(fun, grad, action_set, x0, *, tol=GRAD_TOL, max_iter=MAX_ITERS,
                       c=ARMIJO_C, shrink=SHRINK):
    """Row-wise projected gradient with Barzilai-Borwein trial steps and Armijo backtracking.

    ``fun`` maps (R, k) -> (R,), ``grad`` maps (R, k) -> (R, k). Rows converge
    independently; finished rows are frozen.
    """
    a = action_set.project(np.array(x0, dtype=float))
    rows = a.shape[0]
    g = grad(a)
    fa = fun(a)
    step = np.ones(rows)
    a_prev = g_prev = None
    active = np.ones(rows, dtype=bool)
    pg_norm = np.full(rows, np.inf)
    for _ in range(max_iter):
        pg = a - action_set.project(a - g)
        pg_norm = np.sqrt(np.sum(pg * pg, axis=1))
        active = pg_norm > tol
        if not active.any():
            return a
        if a_prev is not None:
            sa = a - a_prev
            sg = g - g_prev
            num = np.sum(sa * sa, axis=1)
            den = np.sum(sa * sg, axis=1)
            good = (den > 0) & (num > 0)
            step = np.where(good, num / np.where(good, den, 1.0), np.maximum(step, 1e-12) * 2.0)
        s = step.copy()
        todo = active.copy()
        a_new = a.copy()
        f_new = fa.copy()
        for _ in range(60):
            if not todo.any():
                break
            idx = np.flatnonzero(todo)
            trial = action_set.project(a[idx] - s[idx, None] * g[idx])
            ftrial = fun_rows(fun, trial, idx, rows, a)
            slack = 1e-13 * (1.0 + np.abs(fa[idx]))
            ok = ftrial <= fa[idx] + c * np.sum(g[idx] * (trial - a[idx]), axis=1) + slack
            a_new[idx[ok]] = trial[ok]
            f_new[idx[ok]] = ftrial[ok]
            todo[idx[ok]] = False
            s[idx[~ok]] *= shrink
        step = s
        a_prev, g_prev = a, g
        a, fa = a_new, f_new
        g = grad(a)
    pg = a - action_set.project(a - g)
    pg_norm = np.sqrt(np.sum(pg * pg, axis=1))
    if np.all(pg_norm <= tol):
        return a
    worst = int(np.argmax(pg_norm))
    raise OptimizationError(
        f"projected gradient did not reach tolerance after {max_iter} iterations "
        f"(gradient norm {pg_norm[worst]:.3e})",
        last_iterate=a, grad_norm=float(pg_norm[worst]))


def fun_rows(fun, trial, idx, rows, base):
    """Evaluate ``fun`` on a subset of rows; ``fun`` may need the full row layout."""
    if idx.size == rows:
        return fun(trial)
    full = base.copy()
    full[idx] = trial
    return fun(full)[idx]


def check_separable(model, t, x, gamma, P, alpha0, alpha, lam, h=1e-3, tol=1e-6):
    """Mixed derivative of the averaged H0^R in (alpha0, alpha) must vanish."""
    alpha = np.asarray(alpha, float)
    rng = np.random.default_rng(0)
    base = np.abs(grad_alpha0_avg_H0R(model, t, x, gamma, P, alpha0, alpha, lam)).max()
    for direction in (np.ones_like(alpha), rng.choice([-1.0, 1.0], size=alpha.shape)):
        gp = grad_alpha0_avg_H0R(model, t, x, gamma, P, alpha0, alpha + h * direction, lam)
        gm = grad_alpha0_avg_H0R(model, t, x, gamma, P, alpha0, alpha - h * direction, lam)
        mixed = np.abs(gp - gm).max() / (2 * h)
        if mixed > tol * (1.0 + base):
            raise SeparabilityError(
                f"averaged major Hamiltonian couples alpha0 and alpha (mixed derivative {mixed:.3e})")


def minimize_alpha0(model: ModelSpec, t, x, gamma, P, Pg, alpha, lam: Optional[LambdaSummary] = None,
                    *, numeric: Optional[bool] = None, check: bool = True):
    """Minimiser over A0 of the ensemble-averaged H0^R given per-particle (x, gamma, P, Pg, alpha).

    ``lam`` defaults to the law of (x, gamma) itself.
    """
    x = np.asarray(x, float)
    gamma = np.asarray(gamma, float)
    P = np.asarray(P, float)
    if x.shape[0] < 1:
        raise ValueError("empty ensemble")
    if lam is None:
        lam = summarize(ParticleEnsemble.from_parts(x, gamma))
    lam.require(model.reads["major"])
    if alpha is None:
        alpha = np.zeros(gamma.shape)
    alpha = np.asarray(alpha, float)
    use_numeric = model.alpha0_min is None if numeric is None else numeric
    if check:
        check_separable(model, t, x, gamma, P, model.action_set0.project(np.zeros(model.k0)), alpha, lam)
    if not use_numeric:
        return model.action_set0.project(np.asarray(model.alpha0_min(t, x, gamma, P, Pg, alpha, lam), float))
    adj = AdjointState(P, Pg, np.zeros_like(P), np.zeros_like(Pg))

    def fun(a0s):
        return np.array([eval_H0R(model, t, x, gamma, adj, a0, alpha, lam).mean() for a0 in a0s])

    def grad(a0s):
        return np.stack([grad_alpha0_avg_H0R(model, t, x, gamma, P, a0, alpha, lam) for a0 in a0s])

    start = model.action_set0.project(np.zeros((1, model.k0)))
    return projected_gradient(fun, grad, model.action_set0, start)[0]


def minimize_alpha(model: ModelSpec, t, x, gamma, Y, Yg, alpha0, lam: LambdaSummary,
                   *, numeric: Optional[bool] = None):
    """Per-row minimiser over A of H^R; depends on alpha0, which may not be ~0 when
    the alpha-curvature vanishes there."""
    lam.require(model.reads["minor"])
    use_numeric = model.alpha_min is None if numeric is None else numeric
    if not use_numeric:
        return model.action_set.project(np.asarray(model.alpha_min(t, x, gamma, Y, Yg, alpha0, lam), float))
    if model.convexity_alpha(alpha0, lam) <= MEAN_FLOOR ** 2:
        raise SingularControlError("alpha -> H^R is not strongly convex at this alpha0")
    x = np.asarray(x, float)
    lead = x.shape[:-1]
    xf = x.reshape(-1, x.shape[-1])
    gf = np.asarray(gamma, float).reshape(-1, model.k)
    Yf = np.asarray(Y, float).reshape(-1, model.d)
    Ygf = np.asarray(Yg, float).reshape(-1, model.k)
    adj = AdjointState(np.zeros_like(Yf), np.zeros_like(Ygf), Yf, Ygf)

    def fun(a):
        return eval_HR(model, t, xf, gf, adj, alpha0, a, lam)

    def grad(a):
        return grad_alpha_HR(model, t, xf, gf, Yf, Ygf, alpha0, a, lam)

    start = model.action_set.project(np.zeros((xf.shape[0], model.k)))
    return projected_gradient(fun, grad, model.action_set, start).reshape(lead + (model.k,))


@dataclass(frozen=True)
class NecessaryConditionReport:
    major_violation: float
    major_location: Optional[tuple]
    minor_violation: float
    minor_location: Optional[tuple]
    tol: float

    @property
    def max_violation(self) -> float:
        return max(self.major_violation, self.minor_violation)

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol

    def to_dict(self) -> dict:
        return {"major_violation": self.major_violation, "major_location": self.major_location,
                "minor_violation": self.minor_violation, "minor_location": self.minor_location,
                "max_violation": self.max_violation, "tol": self.tol, "passed": self.passed}


DEFAULT_GRID = np.linspace(-5.0, 5.0, 201)


def verify_necessary_conditions(model: ModelSpec, paths, alpha0=None, alpha=None,
                                grid0=DEFAULT_GRID, grid=DEFAULT_GRID, tol: float = VERIFY_TOL):
    """Compare candidate actions against action grids at every time with an active control.

    Major: the ensemble average of H0^R at alpha0 against every grid value
    (deterministic control, dt-a.e.). Minor: per particle H^R at alpha against
    every grid value (dP x dt-a.e.).
    """
    a0_path = paths.alpha0 if alpha0 is None else np.asarray(alpha0, float)
    a_path = paths.alpha if alpha is None else np.asarray(alpha, float)
    grid0 = np.asarray(grid0, float).reshape(-1, model.k0)
    grid = np.asarray(grid, float).reshape(-1, model.k)
    times = paths.grid.times
    worst0, loc0 = 0.0, None
    worst, loc = 0.0, None
    for n in range(len(times) - 1):
        t = times[n]
        x, g = paths.x[n], paths.gamma[n]
        lam_major = summarize(ParticleEnsemble.from_parts(x, g))
        lam_minor = paths.minor_summary(n)
        adj = AdjointState(paths.P[n], paths.Pg[n], paths.Y[n], paths.Yg[n])
        a0 = a0_path[n]
        a = a_path[n]
        if grid0.shape[0]:
            ref = eval_H0R(model, t, x, g, adj, a0, a, lam_major).mean()
            best = min(eval_H0R(model, t, x, g, adj, c, a, lam_major).mean() for c in grid0)
            gap = ref - best
            if gap > worst0:
                worst0, loc0 = float(gap), (int(n), float(t))
        if grid.shape[0]:
            ref = eval_HR(model, t, x, g, adj, a0, a, lam_minor)
            cand = np.broadcast_to(grid[:, None, :], (grid.shape[0],) + a.shape)
            best = eval_HR(model, t, x[None], g[None], adj, a0, cand, lam_minor).min(axis=0)
            gap = ref - best
            i = int(np.argmax(gap))
            if gap[i] > worst:
                worst, loc = float(gap[i]), (int(n), float(t), i)
    return NecessaryConditionReport(worst0, loc0, worst, loc, tol)
