"""Empirical measures on the enlarged state (x, gamma) as equal-weight particle ensembles.

Besides moments and 1-D Wasserstein distances, this module carries the
L-derivatives of the measure functionals the shipped models use: linear
functionals ``mu -> int h dmu``, the reciprocal of a mean, and the zero-padding
rule for functionals that only read one marginal of a joint law.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import PreconditionError, SingularMeanError

MEAN_FLOOR = 1e-8


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Uniformly weighted particles; column layout is ``[x (state_dim) | gamma (rest)]``."""

    particles: np.ndarray
    state_dim: int

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise PreconditionError("ensemble needs at least one particle of fixed dimension")
        if not 0 <= self.state_dim <= p.shape[1]:
            raise PreconditionError(f"state_dim={self.state_dim} incompatible with width {p.shape[1]}")
        if not np.all(np.isfinite(p)):
            raise PreconditionError("ensemble contains non-finite entries")
        object.__setattr__(self, "particles", _as_readonly(p))

    @classmethod
    def from_parts(cls, x, gamma) -> "ParticleEnsemble":
        x = np.asarray(x, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        gamma = gamma[:, None] if gamma.ndim == 1 else gamma
        return cls(np.concatenate([x, gamma], axis=1), x.shape[1])

    @property
    def count(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    @property
    def x(self) -> np.ndarray:
        return self.particles[:, : self.state_dim]

    @property
    def gamma(self) -> np.ndarray:
        return self.particles[:, self.state_dim:]


def _select(ensemble: ParticleEnsemble, coords) -> np.ndarray:
    if ensemble.count < 1:
        raise PreconditionError("empty ensemble")
    if coords is None or (isinstance(coords, str) and coords == "all"):
        return ensemble.particles
    if isinstance(coords, (int, np.integer)):
        coords = [int(coords)]
    sel = ensemble.particles[:, coords]
    if sel.ndim == 1:
        sel = sel[:, None]
    if sel.shape[1] == 0:
        raise PreconditionError("coordinate selector is empty")
    return sel


def mean(ensemble: ParticleEnsemble, coords=None) -> np.ndarray:
    """Arithmetic mean of the selected coordinates (all of them by default)."""
    return _select(ensemble, coords).mean(axis=0)


def second_moment(ensemble: ParticleEnsemble) -> float:
    p = ensemble.particles
    return float(np.einsum("ij,ij->i", p, p).mean())


def _w2_sorted(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    diff = np.sort(a, axis=axis) - np.sort(b, axis=axis)
    return np.sqrt(np.mean(diff * diff, axis=axis))


def wasserstein2_1d(a: ParticleEnsemble, b: ParticleEnsemble, coord: int) -> float:
    """Exact W2 between the 1-D marginals via order statistics."""
    if a.count != b.count:
        raise PreconditionError(f"particle counts differ ({a.count} vs {b.count})")
    if not (0 <= coord < a.dim and coord < b.dim):
        raise PreconditionError(f"coordinate {coord} out of range")
    return float(_w2_sorted(a.particles[:, coord], b.particles[:, coord]))


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Ensembles on a strictly increasing time grid, stored as one (times, particles, dim) array."""

    grid: np.ndarray
    particles: np.ndarray
    state_dim: int

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        parts = np.asarray(self.particles, dtype=float)
        if grid.ndim != 1 or parts.ndim != 3 or parts.shape[0] != grid.shape[0]:
            raise PreconditionError("grid length must equal the number of ensembles")
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise PreconditionError("grid must be strictly increasing")
        if grid[0] < 0:
            raise PreconditionError("grid must start at t >= 0")
        if not np.all(np.isfinite(parts)):
            raise PreconditionError("flow contains non-finite entries")
        object.__setattr__(self, "grid", _as_readonly(grid))
        object.__setattr__(self, "particles", _as_readonly(parts))

    @classmethod
    def from_paths(cls, grid, x, gamma) -> "MeasureFlow":
        """Build from time-major paths ``x`` (M+1, N, d) and ``gamma`` (M+1, N, k)."""
        x = np.asarray(x, dtype=float)
        return cls(grid, np.concatenate([x, np.asarray(gamma, dtype=float)], axis=2), x.shape[2])

    def __len__(self):
        return self.grid.shape[0]

    def __getitem__(self, n: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.particles[n], self.state_dim)

    @property
    def ensembles(self) -> list[ParticleEnsemble]:
        return [self[n] for n in range(len(self))]

    @property
    def count(self) -> int:
        return self.particles.shape[1]


def flow_distance(f: MeasureFlow, g: MeasureFlow) -> float:
    """sup over grid times of the coordinate-wise max of 1-D W2."""
    if f.grid.shape != g.grid.shape or not np.array_equal(f.grid, g.grid):
        raise PreconditionError("flows live on different grids")
    if f.particles.shape != g.particles.shape:
        raise PreconditionError("flows differ in particle count or dimension")
    return float(np.max(_w2_sorted(f.particles, g.particles, axis=1)))


# ---- L-derivatives -------------------------------------------------------

def identity_jacobian(v: np.ndarray) -> np.ndarray:
    n, q = v.shape
    return np.broadcast_to(np.eye(q), (n, q, q)).copy()


def l_derivative_linear(h_jacobian: Callable[[np.ndarray], np.ndarray],
                        ensemble: ParticleEnsemble) -> np.ndarray:
    """L-derivative of ``mu -> int h dmu`` at every particle: the Jacobian of h there.

    ``h_jacobian`` is called once on the (N, q) particle array and must return (N, p, q).
    """
    v = ensemble.particles
    jac = np.asarray(h_jacobian(v), dtype=float)
    if jac.ndim == 2:  # scalar-valued h
        jac = jac[:, None, :]
    if jac.shape[0] != v.shape[0] or jac.shape[2] != v.shape[1]:
        raise PreconditionError(f"jacobian shape {jac.shape} does not match particles {v.shape}")
    return jac


def l_derivative_reciprocal_mean(ensemble: ParticleEnsemble, coord: int,
                                 mean_floor: float = MEAN_FLOOR) -> np.ndarray:
    """L-derivative of ``mu -> 1/mean(mu)`` on one coordinate: ``-1/mean**2`` at every particle."""
    m = float(mean(ensemble, coord)[0])
    if abs(m) <= mean_floor:
        raise SingularMeanError(f"|mean| = {abs(m):.3g} <= floor {mean_floor:g} on coordinate {coord}")
    return np.full(ensemble.count, -1.0 / (m * m))


def marginal_embed(deriv: np.ndarray, which: str, dims: Sequence[int]) -> np.ndarray:
    """Pad an L-derivative taken on one marginal with zero columns for the other marginal.

    ``deriv`` is (N, p, q_which) or (N, q_which) for a scalar functional.
    """
    q1, q2 = int(dims[0]), int(dims[1])
    deriv = np.asarray(deriv, dtype=float)
    scalar = deriv.ndim == 2
    if scalar:
        deriv = deriv[:, None, :]
    if deriv.ndim != 3:
        raise PreconditionError("derivative must be (N, p, q) or (N, q)")
    if which not in ("first", "second"):
        raise PreconditionError(f"which must be 'first' or 'second', got {which!r}")
    own = q1 if which == "first" else q2
    if deriv.shape[2] != own:
        raise PreconditionError(f"derivative width {deriv.shape[2]} != marginal dimension {own}")
    n, p, _ = deriv.shape
    out = np.zeros((n, p, q1 + q2))
    if which == "first":
        out[:, :, :q1] = deriv
    else:
        out[:, :, q1:] = deriv
    return out[:, 0, :] if scalar else out
