"""Finite game with one major and N minor players built from an equilibrium bundle.

All runs and players are simulated at once as (runs, players, dim) arrays.
Brownian increments come from one stream per (seed, run, player), so candidate
and deviated profiles share paths and a null deviation reproduces the
candidate bit for bit.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import PreconditionError
from .fbsde.solver import TimeGrid, solve_minor_control
from .mfg import EquilibriumBundle
from .model import LambdaSummary, ModelSpec


@dataclass(frozen=True)
class FiniteGameConfig:
    N: int
    grid: TimeGrid
    seed: int = 0
    mc_runs: int = 200
    minor_shifts: tuple = (-0.5, -0.25, 0.0, 0.25, 0.5)
    major_shifts: tuple = (-0.5, -0.25, 0.0, 0.25, 0.5)
    best_response: bool = True
    sampled_players: Optional[int] = 5    # None means every player
    br_particles: int = 2000

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise PreconditionError(f"N = {self.N}: the leave-one-out measure needs at least 2 minor players")
        if int(self.mc_runs) != self.mc_runs or self.mc_runs < 1:
            raise PreconditionError("mc_runs must be >= 1")
        if 0.0 not in self.minor_shifts or 0.0 not in self.major_shifts:
            raise PreconditionError("deviation families must contain the null deviation 0")
        if self.sampled_players is not None and self.sampled_players < 1:
            raise PreconditionError("sampled_players must be >= 1")

    @property
    def players(self) -> list:
        k = self.N if self.sampled_players is None else min(self.N, int(self.sampled_players))
        return list(range(k))


def game_noise(seed: int, runs: int, players: int, steps: int, dim: int) -> np.ndarray:
    """(steps + 1, runs, players, dim); row 0 drives the initial law."""
    out = np.empty((steps + 1, runs, players, dim))
    for r in range(runs):
        for i in range(players):
            out[:, r, i, :] = np.random.default_rng([int(seed), int(r), int(i)]).standard_normal((steps + 1, dim))
    return out


@dataclass
class GameOutcome:
    J0: np.ndarray               # (runs,)
    J: np.ndarray                # (runs, N)
    mean_gamma: np.ndarray       # (M+1, runs) empirical mean of gamma
    loo: list                    # per time, leave-one-out summaries (runs, N, .)
    means: dict = field(default_factory=dict)   # per-time averages over runs and players

    def J0_hat(self):
        return float(self.J0.mean())

    def J_hat(self):
        return self.J.mean(axis=0)


def _loo(x, g):
    N = x.shape[1]
    sx = x.sum(axis=1, keepdims=True)
    sg = g.sum(axis=1, keepdims=True)
    mx = (sx - x) / (N - 1)
    mg = (sg - g) / (N - 1)
    m2_i = np.einsum("rnd,rnd->rn", x, x) + np.einsum("rnk,rnk->rn", g, g)
    m2 = (m2_i.sum(axis=1, keepdims=True) - m2_i) / (N - 1)
    return LambdaSummary(mx, mg, m2)


def _full(x, g):
    m2 = (np.einsum("rnd,rnd->rn", x, x) + np.einsum("rnk,rnk->rn", g, g)).mean(axis=1)
    return LambdaSummary(x.mean(axis=1), g.mean(axis=1), m2)


def simulate_finite_game(model: ModelSpec, bundle: EquilibriumBundle, cfg: FiniteGameConfig, *,
                         noise=None, major_shift: float = 0.0, deviator: Optional[int] = None,
                         shift: float = 0.0, policy=None) -> GameOutcome:
    """Realised costs over ``[t_min, T]`` of the candidate profile, optionally deviated.

    ``major_shift`` adds a constant to the major path. ``deviator`` selects one
    minor player who plays the candidate feedback plus ``shift``, or
    ``policy(n, x, gamma)`` when given. Minor feedback always uses the bundle's
    major path and flow summaries.
    """
    grid = cfg.grid
    if grid.M != bundle.grid.M or not np.allclose(grid.times, bundle.grid.times, rtol=0, atol=1e-12):
        raise PreconditionError("finite-game grid differs from the bundle grid")
    R, N, M, dt, times = cfg.mc_runs, cfg.N, grid.M, grid.dt, grid.times
    if noise is None:
        noise = game_noise(cfg.seed, R, N, M, model.m)
    feedback = bundle.feedback(model)
    a0_cand = bundle.alpha0
    a0_play = a0_cand + major_shift
    s0 = bundle.flow_summaries[0]
    mean_P = bundle.fields.theta_P(0, np.asarray(s0.mean_x)[None], np.asarray(s0.mean_gamma)[None])[0, : model.d]
    xm, g_init, x_std = model.initial_state(grid.t_min, mean_P)
    x = xm + x_std * noise[0, :, :, : model.d]
    g = np.broadcast_to(g_init, (R, N, model.k)).copy()
    J0 = np.zeros(R)
    J = np.zeros((R, N))
    mean_gamma = np.empty((M + 1, R))
    loo_hist = []
    cols = ("mean_x", "mean_gamma", "mean_P", "mean_Pgrave", "mean_Y", "mean_Ygrave")
    means = {c: np.empty(M + 1) for c in cols}

    def record(n):
        tp = bundle.fields.theta_P(n, x, g)
        ty = bundle.fields.theta_Y(n, x, g)
        for c, v in zip(cols, (x[..., 0], g[..., 0], tp[..., 0], tp[..., model.d], ty[..., 0], ty[..., model.d])):
            means[c][n] = v.mean()

    for n in range(M):
        t = times[n]
        record(n)
        a = np.asarray(feedback(n, x, g), float)
        if deviator is not None:
            a = a.copy()
            if policy is not None:
                a[:, deviator] = policy(n, x[:, deviator], g[:, deviator])
            else:
                a[:, deviator] = a[:, deviator] + shift
        a = model.action_set.project(a)
        lam_i = _loo(x, g)
        lam = _full(x, g)
        loo_hist.append(lam_i)
        mean_gamma[n] = g[..., 0].mean(axis=1)
        J += model.f(t, x, g, a0_play[n], a, lam_i) * dt
        J0 += model.f0(t, a0_play[n], lam) * dt
        b = model.drift(t, x, g, a0_play[n], a, lam_i)
        s = model.vol(t, x, g)
        x = x + b * dt + np.einsum("rndm,rnm->rnd", s, noise[n + 1], optimize=False) * np.sqrt(dt)
        g = g + a * dt
    record(M)
    lam_i = _loo(x, g)
    loo_hist.append(lam_i)
    mean_gamma[M] = g[..., 0].mean(axis=1)
    J += model.g(x, g, lam_i)
    J0 += model.g0(_full(x, g))
    return GameOutcome(J0, J, mean_gamma, loo_hist, means)


@dataclass
class NashGapReport:
    N: int
    mc_runs: int
    J0_hat: float
    J0_se: float
    Ji_hat: list
    major_deviations: list       # [{"shift", "J0", "gain", "se"}]
    minor_deviations: list       # per sampled player: {"player", "deviations": [{"kind", "arg", "J", "gain", "se"}]}
    eps_major: float
    eps_major_se: float
    eps_minor: list              # per sampled player
    eps_minor_se: list
    eps_minor_max: float
    eps_minor_max_se: float
    cost_increase: dict          # minor shift -> mean cost increase over sampled players
    flow_gap: float              # sup_t |empirical mean gamma - bundle mean gamma|, run-averaged
    per_run: list = field(default_factory=list)   # (run, player, cost); player 0 is the major

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "per_run"}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "player", "cost"])
        for r, i, c in self.per_run:
            w.writerow([r, i, "%.17g" % c])
        return buf.getvalue()


def _gap(cand: np.ndarray, dev: np.ndarray):
    diff = cand - dev
    se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
    return float(diff.mean()), se


def estimate_eps_nash(model: ModelSpec, bundle: EquilibriumBundle, cfg: FiniteGameConfig) -> NashGapReport:
    R, N = cfg.mc_runs, cfg.N
    noise = game_noise(cfg.seed, R, N, cfg.grid.M, model.m)
    base = simulate_finite_game(model, bundle, cfg, noise=noise)

    major = []
    for d in cfg.major_shifts:
        out = base if d == 0.0 else simulate_finite_game(model, bundle, cfg, noise=noise, major_shift=d)
        gain, se = _gap(base.J0, out.J0)
        major.append({"shift": float(d), "J0": out.J0_hat(), "gain": gain, "se": se})
    best = max(major, key=lambda r: r["gain"])
    eps_major, eps_major_se = max(best["gain"], 0.0), best["se"]

    minor, eps_i, eps_se = [], [], []
    increase = {float(d): [] for d in cfg.minor_shifts}
    for i in cfg.players:
        rows = []
        for d in cfg.minor_shifts:
            out = base if d == 0.0 else simulate_finite_game(model, bundle, cfg, noise=noise, deviator=i, shift=d)
            gain, se = _gap(base.J[:, i], out.J[:, i])
            rows.append({"kind": "shift", "arg": float(d), "J": float(out.J[:, i].mean()), "gain": gain, "se": se})
            increase[float(d)].append(-gain)
        if cfg.best_response:
            # frozen environment: run-averaged law of the other players, candidate major path
            summaries = [LambdaSummary(*(np.asarray(getattr(s, f))[:, i].mean(axis=0)
                                         for f in ("mean_x", "mean_gamma", "second_moment")))
                         for s in base.loo]
            pol = solve_minor_control(model, cfg.grid, bundle.alpha0, summaries, particles=cfg.br_particles,
                                      seed=cfg.seed, degree=bundle.fields.degree)
            out = simulate_finite_game(model, bundle, cfg, noise=noise, deviator=i,
                                       policy=lambda n, x, g, pol=pol: pol(n, x, g))
            gain, se = _gap(base.J[:, i], out.J[:, i])
            rows.append({"kind": "best_response", "arg": None, "J": float(out.J[:, i].mean()),
                         "gain": gain, "se": se})
        top = max(rows, key=lambda r: r["gain"])
        eps_i.append(max(top["gain"], 0.0))
        eps_se.append(top["se"])
        minor.append({"player": i, "deviations": rows})
    j = int(np.argmax(eps_i))
    bundle_mg = np.array([float(np.asarray(s.mean_gamma).reshape(-1)[0]) for s in bundle.flow_summaries])
    flow_gap = float(np.abs(base.mean_gamma - bundle_mg[:, None]).max(axis=0).mean())
    per_run = [(r, 0, float(base.J0[r])) for r in range(R)]
    per_run += [(r, i + 1, float(base.J[r, i])) for r in range(R) for i in range(N)]
    return NashGapReport(
        N=N, mc_runs=R, J0_hat=base.J0_hat(), J0_se=float(base.J0.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0,
        Ji_hat=base.J_hat().tolist(), major_deviations=major, minor_deviations=minor,
        eps_major=float(eps_major), eps_major_se=float(eps_major_se), eps_minor=[float(e) for e in eps_i],
        eps_minor_se=[float(s) for s in eps_se], eps_minor_max=float(eps_i[j]), eps_minor_max_se=float(eps_se[j]),
        cost_increase={str(k): float(np.mean(v)) for k, v in increase.items()},
        flow_gap=flow_gap, per_run=per_run)
