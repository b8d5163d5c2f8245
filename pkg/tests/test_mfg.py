import json
from dataclasses import replace

import numpy as np
import pytest

from mmfg.errors import FixedPointError, PreconditionError
from mmfg.fbsde import SolverConfig
from mmfg.hamiltonian import verify_necessary_conditions
from mmfg.mfg import (EquilibriumBundle, export_equilibrium, fit_decoupling_fields, fixed_point_certificate,
                      solve_mmmfg)
from mmfg.model import make_model

from conftest import mean_reverting_model


def test_example1_outer_loop(ex1_solution):
    assert ex1_solution.outer_iterations <= 3
    assert ex1_solution.fixed_point_residuals[-1] <= ex1_solution.config.fp_tol
    assert np.all(ex1_solution.alpha0_path == -1.0)


def test_uncoupled_model_needs_a_single_update():
    # the minor player ignores the flow, so the first induced flow is already the fixed point
    sol = solve_mmmfg(mean_reverting_model(), SolverConfig(particles=300, steps=20, t_min=0.0))
    assert sol.outer_iterations == 1
    assert sol.fixed_point_residuals[-1] == 0.0


def test_coupled_model_reports_fixed_point_failure():
    cfg = SolverConfig(particles=200, steps=20, t_min=0.0, fp_tol=1e-14, outer_max_iter=2)
    with pytest.raises(FixedPointError) as info:
        solve_mmmfg(mean_reverting_model(coupling=0.8), cfg)
    assert len(info.value.residuals) == 3


def test_coupled_model_converges():
    sol = solve_mmmfg(mean_reverting_model(coupling=0.8), SolverConfig(particles=300, steps=20, t_min=0.0))
    r = sol.fixed_point_residuals
    assert r[-1] <= 5e-2 and r[-1] < r[1]


def test_decoupling_fields_example1(ex1_solution):
    f = fit_decoupling_fields(ex1_solution)
    x = np.linspace(-2, 2, 7)[:, None]
    for n in (0, 50, 100):
        y = f.theta_Y(n, x, np.ones_like(x))
        assert np.array_equal(y, np.tile([-1.0, 0.0], (7, 1)))
    assert f.Y_residuals.max() == 0.0
    assert f.P_residuals.max() == 0.0


def test_decoupling_fields_example2(ex2_small):
    f = fit_decoupling_fields(ex2_small)
    assert f.P_residuals.max() <= 1e-6
    P = f.theta_P(40, ex2_small.fbsde.x[40], ex2_small.fbsde.gamma[40])
    assert np.allclose(P[:, 0], -1.0, atol=1e-6)


def test_example2_necessary_conditions(ex2_small):
    rep = verify_necessary_conditions(make_model("example2"), ex2_small.fbsde)
    assert rep.max_violation <= 1e-4 and rep.passed


def test_certificate(ex2_small):
    cert = fixed_point_certificate(ex2_small)
    assert cert["strategy_change"] <= 2 * ex2_small.config.tol
    assert cert["flow_change"] <= 2 * ex2_small.config.fp_tol


def test_bundle_example1_and_roundtrip(ex1_solution):
    b = export_equilibrium(ex1_solution, fit_decoupling_fields(ex1_solution))
    assert np.all(b.alpha0 == -1.0)
    text = b.to_json()
    again = EquilibriumBundle.from_json(text)
    assert again.to_json() == text
    assert json.loads(text)["model"]["name"] == "example1"


def test_bundle_rejects_other_versions(ex1_solution):
    d = export_equilibrium(ex1_solution, fit_decoupling_fields(ex1_solution)).to_dict()
    d["spec_version"] = "0.9"
    with pytest.raises(PreconditionError):
        EquilibriumBundle.from_dict(d)


def test_bundle_example2_interpolates_major_action(ex2_big):
    b = export_equilibrium(ex2_big, fit_decoupling_fields(ex2_big))
    assert b.alpha0_at(0.125) == pytest.approx(-np.cbrt(0.375), rel=2e-2)


def test_bundle_feedback_reproduces_solver_controls(ex2_small):
    m = make_model("example2")
    fields = fit_decoupling_fields(ex2_small)
    b = EquilibriumBundle.from_json(export_equilibrium(ex2_small, fields).to_json())
    alpha = b.feedback(m)
    p = ex2_small.fbsde
    for n in (0, 30, 99):
        # stored alpha is the last Picard iterate: fit error through d alpha / d y = 1 / a0^2, plus the residual
        bound = fields.Y_residuals[n] / p.alpha0[n, 0] ** 2 + p.residuals[-1] + 1e-12
        assert np.abs(alpha(n, p.x[n], p.gamma[n]) - p.alpha[n]).max() <= bound
    direct = ex2_small.alpha_feedback(fields)
    assert np.array_equal(direct(10, p.x[10], p.gamma[10]), alpha(10, p.x[10], p.gamma[10]))


def test_outer_loop_is_deterministic():
    cfg = SolverConfig(particles=300, steps=30)
    a = solve_mmmfg(make_model("example2"), cfg)
    b = solve_mmmfg(make_model("example2"), cfg)
    assert np.array_equal(a.alpha0_path, b.alpha0_path)
    assert np.array_equal(a.equilibrium_flow.particles, b.equilibrium_flow.particles)
    c = solve_mmmfg(make_model("example2"), replace(cfg, seed=3))
    assert not np.array_equal(a.equilibrium_flow.particles, c.equilibrium_flow.particles)
