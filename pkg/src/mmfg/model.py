"""Game instances: coefficient bundles for the regulator/firm model family.

Coefficient callables are vectorised: state-like arguments carry features on the
last axis and any leading shape (particles, or runs x players), and a
``LambdaSummary`` may carry per-row statistics that broadcast against them.
The major player has no state in the shipped models, so the major-state fields
of the general framework are simply absent here.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import measure
from .errors import ConfigurationError, PreconditionError, SingularControlError, SingularMeanError
from .measure import MEAN_FLOOR, ParticleEnsemble

STATISTICS = ("mean_x", "mean_gamma", "second_moment")


@dataclass(frozen=True)
class LambdaSummary:
    """Statistics of a law on (x, gamma) that coefficient functions are allowed to read."""

    mean_x: Optional[np.ndarray] = None
    mean_gamma: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None

    def require(self, names):
        missing = [s for s in names if getattr(self, s) is None]
        if missing:
            raise ConfigurationError(f"lambda summary lacks statistics read by the model: {missing}")
        return self

    def to_dict(self) -> dict:
        out = {}
        for s in STATISTICS:
            v = getattr(self, s)
            if v is not None:
                out[s] = np.asarray(v, dtype=float).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LambdaSummary":
        return cls(**{s: np.asarray(d[s], dtype=float) for s in STATISTICS if s in d})


def summarize(ensemble: ParticleEnsemble) -> LambdaSummary:
    return LambdaSummary(
        mean_x=measure.mean(ensemble, list(range(ensemble.state_dim))),
        mean_gamma=measure.mean(ensemble, list(range(ensemble.state_dim, ensemble.dim))),
        second_moment=np.asarray(measure.second_moment(ensemble)),
    )


def summarize_paths(x: np.ndarray, gamma: np.ndarray) -> list[LambdaSummary]:
    """Per-time summaries of time-major paths (M+1, N, .)."""
    mx = x.mean(axis=1)
    mg = gamma.mean(axis=1)
    m2 = (np.einsum("tnd,tnd->tn", x, x) + np.einsum("tnk,tnk->tn", gamma, gamma)).mean(axis=1)
    return [LambdaSummary(mx[n], mg[n], np.asarray(m2[n])) for n in range(x.shape[0])]


@dataclass(frozen=True)
class ActionSet:
    """All of R^k (bounds None) or a closed box."""

    dim: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.broadcast_to(np.asarray(v, dtype=float), (self.dim,)).copy())
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise PreconditionError("action box has lower > upper")

    @property
    def unbounded(self) -> bool:
        return self.lower is None and self.upper is None

    def project(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.lower is not None:
            a = np.maximum(a, self.lower)
        if self.upper is not None:
            a = np.minimum(a, self.upper)
        return a

    def contains(self, a: np.ndarray, tol: float = 0.0) -> bool:
        a = np.asarray(a, dtype=float)
        ok = np.all(np.isfinite(a))
        if self.lower is not None:
            ok = ok and bool(np.all(a >= self.lower - tol))
        if self.upper is not None:
            ok = ok and bool(np.all(a <= self.upper + tol))
        return bool(ok)


@dataclass(frozen=True)
class SigmaSchedule:
    """Piecewise-constant volatility; ``values[i]`` holds on ``[times[i], times[i+1])``."""

    times: tuple = (0.0,)
    values: tuple = (0.2,)

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise PreconditionError("sigma schedule needs matching, nonempty times and values")
        if self.times[0] != 0.0 or any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise PreconditionError("sigma schedule times must start at 0 and increase")
        if any(v < 0 or not np.isfinite(v) for v in self.values):
            raise PreconditionError("sigma values must be finite and nonnegative")

    @classmethod
    def constant(cls, sigma: float) -> "SigmaSchedule":
        return cls((0.0,), (float(sigma),))

    def __call__(self, t: float) -> float:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(i, 0)])

    def integral_sq(self, t0: float, t1: float) -> float:
        """int_{t0}^{t1} sigma_s^2 ds."""
        edges = list(self.times[1:]) + [np.inf]
        total = 0.0
        for lo, hi, v in zip(self.times, edges, self.values):
            a, b = max(lo, t0), min(hi, t1)
            if b > a:
                total += v * v * (b - a)
        return total


@dataclass(frozen=True)
class Oracle:
    """Closed-form equilibrium on the mean level, where one is known."""

    alpha0: Callable[[np.ndarray], np.ndarray]
    alpha: Callable[[np.ndarray], np.ndarray]
    mean_gamma: Callable[[np.ndarray], np.ndarray]
    mean_x: Callable[[np.ndarray], np.ndarray]


def _zeros_like_state(x, width):
    return np.zeros(np.shape(x)[:-1] + (width,))


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d: int
    k: int
    k0: int
    m: int
    horizon: float
    sigma: SigmaSchedule
    drift: Callable
    vol: Callable
    f0: Callable
    g0: Callable
    f: Callable
    g: Callable
    # partials
    drift_da0: Callable
    drift_da: Callable
    drift_dx: Callable
    drift_dg: Callable
    f0_da0: Callable
    f_da: Callable
    f_dx: Callable
    f_dg: Callable
    g_dx: Callable
    g_dg: Callable
    # L-derivatives at every particle, shape (N, d + k)
    f0_dlam: Callable
    g0_dlam: Callable
    drift_dlam_adj: Optional[Callable] = None
    # strong-convexity moduli of a0 -> E[H0^R] and a -> H^R
    convexity_alpha0: Callable = lambda lam: 1.0
    convexity_alpha: Callable = lambda a0, lam: 1.0
    action_set0: ActionSet = None
    action_set: ActionSet = None
    alpha0_min: Optional[Callable] = None
    alpha_min: Optional[Callable] = None
    oracle: Optional[Oracle] = None
    startup: Optional[Callable] = None
    reads: dict = field(default_factory=lambda: {"minor": (), "major": ()})
    mean_reducible: bool = False
    x0: np.ndarray = None
    gamma0: np.ndarray = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon <= 0:
            raise PreconditionError("horizon T must be positive")
        if self.action_set0 is None:
            object.__setattr__(self, "action_set0", ActionSet(self.k0))
        if self.action_set is None:
            object.__setattr__(self, "action_set", ActionSet(self.k))
        object.__setattr__(self, "x0", np.zeros(self.d) if self.x0 is None else np.asarray(self.x0, float).reshape(self.d))
        object.__setattr__(self, "gamma0",
                           np.zeros(self.k) if self.gamma0 is None else np.asarray(self.gamma0, float).reshape(self.k))

    @property
    def minor_reads_flow(self) -> bool:
        return bool(self.reads.get("minor"))

    def initial_state(self, t_min: float, mean_P=None):
        """Mean of X, value of gamma, and per-coordinate std of X at ``t_min``."""
        if self.startup is not None and t_min > 0:
            return self.startup(self, t_min, mean_P)
        std = np.full(self.d, np.sqrt(self.sigma.integral_sq(0.0, t_min)))
        return self.x0.copy(), self.gamma0.copy(), std

    def without_analytic(self) -> "ModelSpec":
        """Same model forced onto the numeric minimisers."""
        return replace(self, alpha0_min=None, alpha_min=None)


# ---- the regulator / firm family ------------------------------------------

def _recip(m, floor=MEAN_FLOOR):
    m = np.asarray(m, dtype=float)
    if np.any(np.abs(m) <= floor):
        raise SingularMeanError(f"mean gamma within {floor:g} of zero")
    return 1.0 / m


def _mg(lam):
    return np.asarray(lam.mean_gamma)[..., 0]


def _mx(lam):
    return np.asarray(lam.mean_x)[..., 0]


def _green_model(name, *, weighted: bool, kappa: float, sigma: SigmaSchedule, horizon: float,
                 x0: float, gamma0: float, params: dict) -> ModelSpec:
    """b = a - a0 - sigma^2/2, f = a^2 a0^2 / 2, g = -x, g0 = -mean_x + mean_gamma.

    ``weighted`` switches the regulator's running cost from a0^2/2 to
    a0^2/(2 mean_gamma); ``kappa`` adds ``kappa * a0 * mean_x``.
    """

    def drift(t, x, g, a0, a, lam):
        s = sigma(t)
        return np.asarray(a, float) - np.asarray(a0, float)[..., :1] - 0.5 * s * s + 0.0 * np.asarray(x, float)

    def vol(t, x, g):
        return np.full(np.shape(x)[:-1] + (1, 1), sigma(t))

    def f0(t, a0, lam):
        a0 = np.asarray(a0, float)[..., 0]
        val = 0.5 * a0 * a0
        if weighted:
            val = val * _recip(_mg(lam))
        if kappa != 0.0:
            val = val + kappa * a0 * _mx(lam)
        return val

    def g0(lam):
        return -_mx(lam) + _mg(lam)

    def f(t, x, g, a0, a, lam):
        a = np.asarray(a, float)[..., 0]
        a0 = np.asarray(a0, float)[..., 0]
        return 0.5 * a * a * a0 * a0

    def g_(x, g, lam):
        return -np.asarray(x, float)[..., 0]

    def drift_da0(t, x, g, a0, a, lam):
        return np.full(np.shape(x)[:-1] + (1, 1), -1.0)

    def drift_da(t, x, g, a0, a, lam):
        return np.full(np.shape(x)[:-1] + (1, 1), 1.0)

    def drift_dx(t, x, g, a0, a, lam):
        return np.zeros(np.shape(x)[:-1] + (1, 1))

    def drift_dg(t, x, g, a0, a, lam):
        return np.zeros(np.shape(x)[:-1] + (1, 1))

    def f0_da0(t, a0, lam):
        a0 = np.asarray(a0, float)
        val = a0 * (_recip(_mg(lam)) if weighted else 1.0)
        if kappa != 0.0:
            val = val + kappa * _mx(lam)
        return np.asarray(val, float)

    def f_da(t, x, g, a0, a, lam):
        a0 = np.asarray(a0, float)[..., :1]
        return np.asarray(a, float) * a0 * a0

    def f_dx(t, x, g, a0, a, lam):
        return _zeros_like_state(x, 1)

    def f_dg(t, x, g, a0, a, lam):
        return _zeros_like_state(g, 1)

    def g_dx(x, g, lam):
        return np.full(np.shape(x), -1.0)

    def g_dg(x, g, lam):
        return _zeros_like_state(g, 1)

    dims = (1, 1)

    def f0_dlam(t, a0, ens):
        a0 = float(np.asarray(a0).reshape(-1)[0])
        out = np.zeros((ens.count, 2))
        if weighted:
            out += 0.5 * a0 * a0 * measure.marginal_embed(
                measure.l_derivative_reciprocal_mean(ens, 1)[:, None], "second", dims)
        if kappa != 0.0:
            out += kappa * a0 * measure.marginal_embed(
                measure.l_derivative_linear(measure.identity_jacobian, ParticleEnsemble(ens.x, 1))[:, 0, :],
                "first", dims)
        return out

    def g0_dlam(ens):
        dx = measure.l_derivative_linear(measure.identity_jacobian, ParticleEnsemble(ens.x, 1))[:, 0, :]
        dg = measure.l_derivative_linear(measure.identity_jacobian, ParticleEnsemble(ens.gamma, 1))[:, 0, :]
        return -measure.marginal_embed(dx, "first", dims) + measure.marginal_embed(dg, "second", dims)

    def convexity_alpha0(lam):
        return float(_recip(_mg(lam))) if weighted else 1.0

    def convexity_alpha(a0, lam):
        a0 = float(np.asarray(a0).reshape(-1)[0])
        return a0 * a0

    def alpha0_min(t, x, g, P, Pg, a, lam):
        # stationarity of a0 -> E[(a - a0 - s^2/2) P + a Pg] + f0(a0)
        EP = float(np.mean(np.asarray(P)[..., 0]))
        target = EP - (kappa * float(_mx(lam)) if kappa != 0.0 else 0.0)
        if weighted:
            return np.array([target * float(_mg(lam))])
        return np.array([target])

    def alpha_min(t, x, g, y, yg, a0, lam):
        a0 = float(np.asarray(a0).reshape(-1)[0])
        if abs(a0) <= MEAN_FLOOR:
            raise SingularControlError(f"|alpha0| = {abs(a0):.3g} too small for a -> a^2 a0^2 / 2")
        return -(np.asarray(y, float)[..., :1] + np.asarray(yg, float)[..., :1]) / (a0 * a0)

    def startup(model, t_min, mean_P):
        # closed-form mean path on [0, t_min] with the major adjoint frozen at c
        EP = -1.0 if mean_P is None else float(np.asarray(mean_P).reshape(-1)[0])
        sig2 = sigma.integral_sq(0.0, t_min)
        g_init = float(model.gamma0[0])
        x_init = float(model.x0[0])
        if not weighted:
            c = EP - kappa * x_init
            a = 1.0 / (c * c)
            gam = g_init + a * t_min
            xm = x_init + (a - c) * t_min - 0.5 * sig2
        else:
            c = EP - kappa * x_init
            gam = np.cbrt(g_init ** 3 + 3.0 * t_min / (c * c))
            xm = x_init + (gam - g_init) - 0.25 * c ** 3 * (gam ** 4 - g_init ** 4) - 0.5 * sig2
        return np.array([xm]), np.array([gam]), np.array([np.sqrt(sig2)])

    oracle = None
    if kappa == 0.0 and gamma0 == 0.0:
        if not weighted:
            def _sig2(t):
                return np.array([sigma.integral_sq(0.0, s) for s in np.atleast_1d(t)])
            oracle = Oracle(
                alpha0=lambda t: -np.ones_like(np.asarray(t, float)),
                alpha=lambda t: np.ones_like(np.asarray(t, float)),
                mean_gamma=lambda t: np.asarray(t, float),
                mean_x=lambda t: x0 + 2.0 * np.asarray(t, float) - 0.5 * _sig2(t).reshape(np.shape(t)),
            )
        else:
            def _sig2(t):
                return np.array([sigma.integral_sq(0.0, s) for s in np.atleast_1d(t)])
            oracle = Oracle(
                alpha0=lambda t: -np.cbrt(3.0 * np.asarray(t, float)),
                alpha=lambda t: np.cbrt(3.0 * np.asarray(t, float)) ** -2,
                mean_gamma=lambda t: np.cbrt(3.0 * np.asarray(t, float)),
                mean_x=lambda t: (x0 + np.cbrt(3.0 * np.asarray(t, float))
                                  + 0.75 * np.cbrt(3.0) * np.asarray(t, float) ** (4.0 / 3.0)
                                  - 0.5 * _sig2(t).reshape(np.shape(t))),
            )

    major_reads = ("mean_x", "mean_gamma")
    return ModelSpec(
        name=name, d=1, k=1, k0=1, m=1, horizon=horizon, sigma=sigma,
        drift=drift, vol=vol, f0=f0, g0=g0, f=f, g=g_,
        drift_da0=drift_da0, drift_da=drift_da, drift_dx=drift_dx, drift_dg=drift_dg,
        f0_da0=f0_da0, f_da=f_da, f_dx=f_dx, f_dg=f_dg, g_dx=g_dx, g_dg=g_dg,
        f0_dlam=f0_dlam, g0_dlam=g0_dlam,
        convexity_alpha0=convexity_alpha0, convexity_alpha=convexity_alpha,
        alpha0_min=alpha0_min, alpha_min=alpha_min, oracle=oracle, startup=startup,
        reads={"minor": (), "major": major_reads}, mean_reducible=True,
        x0=np.array([x0]), gamma0=np.array([gamma0]), params=params,
    )


def _common(sigma, horizon, x0, gamma0):
    if sigma is None:
        sigma = SigmaSchedule.constant(0.2)
    elif not isinstance(sigma, SigmaSchedule):
        sigma = SigmaSchedule.constant(float(sigma))
    return sigma, float(horizon), float(x0), float(gamma0)


def make_example1(sigma=None, horizon: float = 1.0, x0: float = 0.0, gamma0: float = 0.0) -> ModelSpec:
    """Flat tax cost: f0 = a0^2/2. Equilibrium a0 = -1, a = 1."""
    sigma, horizon, x0, gamma0 = _common(sigma, horizon, x0, gamma0)
    return _green_model("example1", weighted=False, kappa=0.0, sigma=sigma, horizon=horizon,
                        x0=x0, gamma0=gamma0, params={})


def make_example2(sigma=None, horizon: float = 1.0, x0: float = 0.0, gamma0: float = 0.0) -> ModelSpec:
    """Emission-weighted tax cost f0 = a0^2/(2 mean_gamma); mean gamma = (3t)^(1/3)."""
    sigma, horizon, x0, gamma0 = _common(sigma, horizon, x0, gamma0)
    return _green_model("example2", weighted=True, kappa=0.0, sigma=sigma, horizon=horizon,
                        x0=x0, gamma0=gamma0, params={})


def make_example3(kappa: float = 1.0, sigma=None, horizon: float = 1.0, x0: float = 0.0,
                  gamma0: float = 0.0) -> ModelSpec:
    """Example 2 plus the tax-economy coupling ``kappa * a0 * mean_x``; no closed form."""
    sigma, horizon, x0, gamma0 = _common(sigma, horizon, x0, gamma0)
    return _green_model("example3", weighted=True, kappa=float(kappa), sigma=sigma, horizon=horizon,
                        x0=x0, gamma0=gamma0, params={"kappa": float(kappa)})


MODELS = {"example1": make_example1, "example2": make_example2, "example3": make_example3}


def make_model(name: str, **params) -> ModelSpec:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return factory(**params)
