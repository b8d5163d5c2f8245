"""Least-squares projection onto polynomials in (x, gamma).

Reductions avoid BLAS so fitted values do not depend on the thread count.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from ..errors import BasisDegeneracyError

COND_MAX = 1e12


def exponents(n_features: int, degree: int) -> list[tuple]:
    """Multi-indices of total degree <= ``degree``, constant first, then by degree."""
    out = [tuple([0] * n_features)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_features), deg):
            e = [0] * n_features
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


@dataclass(frozen=True, eq=False)
class PolynomialFit:
    active: tuple           # indices of non-constant input features
    shift: np.ndarray       # per active feature
    scale: np.ndarray
    powers: np.ndarray      # (p, n_active) integer exponents
    coef: np.ndarray        # (p, q_out)

    def design(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        u = (z[..., list(self.active)] - self.shift) / self.scale
        B = np.ones(z.shape[:-1] + (self.powers.shape[0],))
        for j in range(self.powers.shape[1]):
            col = u[..., j]
            for p in range(1, int(self.powers[:, j].max(initial=0)) + 1):
                B[..., self.powers[:, j] >= p] *= col[..., None]
        return B

    def __call__(self, z: np.ndarray) -> np.ndarray:
        B = self.design(z)
        return np.einsum("...p,pq->...q", B, self.coef)

    def to_dict(self) -> dict:
        return {"active": list(self.active), "shift": self.shift.tolist(), "scale": self.scale.tolist(),
                "powers": self.powers.tolist(), "coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolynomialFit":
        n_act = len(d["active"])
        return cls(tuple(int(i) for i in d["active"]),
                   np.asarray(d["shift"], float).reshape(n_act),
                   np.asarray(d["scale"], float).reshape(n_act),
                   np.asarray(d["powers"], int).reshape(len(d["powers"]), n_act),
                   np.asarray(d["coef"], float).reshape(len(d["powers"]), -1))


def fit_polynomial(features: np.ndarray, targets: np.ndarray, degree: int):
    """Regress ``targets`` (N, q) on a total-degree polynomial basis in ``features`` (N, f).

    Features that are constant over the sample are dropped (they live in the
    intercept); constant target columns are reproduced exactly. Returns
    ``(fit, fitted_values, r2)``.
    """
    z = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    active = tuple(int(i) for i in np.flatnonzero(sd > 1e-12 * (1.0 + np.abs(mu))))
    exps = exponents(len(active), degree)
    powers = np.array(exps, dtype=int).reshape(len(exps), len(active))
    fit0 = PolynomialFit(active, mu[list(active)], sd[list(active)], powers, np.zeros((powers.shape[0], y.shape[1])))
    const_cols = np.ptp(y, axis=0) == 0
    coef = np.zeros((powers.shape[0], y.shape[1]))
    coef[0, const_cols] = y[0, const_cols]
    if not const_cols.all():
        if y.shape[0] < powers.shape[0]:
            raise BasisDegeneracyError(
                f"{y.shape[0]} samples for {powers.shape[0]} basis functions; lower the degree")
        B = fit0.design(z)
        gram = np.einsum("ni,nj->ij", B, B) / B.shape[0]
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > COND_MAX:
            raise BasisDegeneracyError(f"regression basis is degenerate (condition {cond:.2e}); lower the degree")
        free = ~const_cols
        rhs = np.einsum("ni,nq->iq", B, y[:, free]) / B.shape[0]
        coef[:, free] = np.linalg.solve(gram, rhs)
    fit = PolynomialFit(active, fit0.shift, fit0.scale, powers, coef)
    fitted = y.copy()
    if not const_cols.all():
        fitted[:, ~const_cols] = fit(z)[:, ~const_cols]
    resid = y - fitted
    ss_tot = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    ss_res = np.sum(resid ** 2, axis=0)
    r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 1.0)
    return fit, fitted, float(r2.mean())
