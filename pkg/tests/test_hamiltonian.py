from dataclasses import replace

import numpy as np
import pytest

from mmfg.errors import OptimizationError, SeparabilityError, SingularControlError
from mmfg.hamiltonian import (AdjointState, eval_H0R, eval_HR, minimize_alpha, minimize_alpha0, projected_gradient,
                              verify_necessary_conditions)
from mmfg.measure import ParticleEnsemble
from mmfg.model import ActionSet, LambdaSummary, make_model, summarize

from conftest import mean_reverting_model


def random_state(rng, n=20):
    x = rng.normal(size=(n, 1))
    g = rng.uniform(0.3, 2.0, size=(n, 1))
    P = rng.uniform(-1.5, -0.5, size=(n, 1))
    Pg = rng.uniform(-1, 1, size=(n, 1))
    Y = rng.uniform(-1, 1, size=(n, 1))
    Yg = rng.uniform(-1, 1, size=(n, 1))
    a = rng.normal(size=(n, 1))
    return x, g, P, Pg, Y, Yg, a


@pytest.mark.parametrize("name", ["example1", "example2", "example3"])
def test_numeric_minimisers_match_analytic(name):
    m = make_model(name)
    rng = np.random.default_rng(10)
    for _ in range(20):
        x, g, P, Pg, Y, Yg, a = random_state(rng)
        lam = summarize(ParticleEnsemble.from_parts(x, g))
        a0_an = minimize_alpha0(m, 0.5, x, g, P, Pg, a, lam, numeric=False)
        a0_nu = minimize_alpha0(m, 0.5, x, g, P, Pg, a, lam, numeric=True)
        assert np.abs(a0_an - a0_nu).max() <= 1e-6
        a0 = np.array([rng.choice([-1, 1]) * rng.uniform(0.5, 2.0)])
        an = minimize_alpha(m, 0.5, x, g, Y, Yg, a0, lam, numeric=False)
        nu = minimize_alpha(m, 0.5, x, g, Y, Yg, a0, lam, numeric=True)
        assert np.abs(an - nu).max() <= 1e-6


def test_major_minimiser_is_stationary_for_averaged_hamiltonian():
    m = make_model("example3", kappa=0.7)
    rng = np.random.default_rng(11)
    x, g, P, Pg, Y, Yg, a = random_state(rng)
    lam = summarize(ParticleEnsemble.from_parts(x, g))
    a0 = minimize_alpha0(m, 0.2, x, g, P, Pg, a, lam)
    adj = AdjointState(P, Pg, Y, Yg)
    val = lambda c: eval_H0R(m, 0.2, x, g, adj, np.array([c]), a, lam).mean()
    for h in (1e-3, -1e-3, 0.1):
        assert val(a0[0] + h) > val(a0[0])
    expected = (P.mean() - 0.7 * x.mean()) * g.mean()
    assert a0[0] == pytest.approx(expected, rel=1e-12)


def test_lq_minimisers():
    m = mean_reverting_model()
    rng = np.random.default_rng(12)
    x, g, P, Pg, Y, Yg, a = random_state(rng)
    lam = summarize(ParticleEnsemble.from_parts(x, g))
    assert minimize_alpha0(m, 0.0, x, g, P, Pg, a, lam, numeric=True)[0] == pytest.approx(1 - P.mean(), abs=1e-7)
    assert np.allclose(minimize_alpha(m, 0.0, x, g, Y, Yg, np.array([1.0]), lam, numeric=True), -(Y + Yg),
                       atol=1e-7)


def test_box_constraint_projects_minimiser():
    m = replace(make_model("example1").without_analytic(), action_set=ActionSet(1, lower=-0.5, upper=0.5))
    rng = np.random.default_rng(13)
    x, g, P, Pg, Y, Yg, a = random_state(rng, 4)
    lam = summarize(ParticleEnsemble.from_parts(x, g))
    out = minimize_alpha(m, 0.0, x, g, Y, Yg, np.array([1.0]), lam)
    assert np.allclose(out, np.clip(-(Y + Yg), -0.5, 0.5), atol=1e-7)


def test_separability_violation_detected():
    m = make_model("example1")
    coupled = replace(m, drift_da0=lambda t, x, g, a0, a, lam: -np.asarray(a, float)[..., None])
    rng = np.random.default_rng(14)
    x, g, P, Pg, Y, Yg, a = random_state(rng)
    with pytest.raises(SeparabilityError):
        minimize_alpha0(coupled, 0.0, x, g, P, Pg, a)


def test_minor_minimiser_rejects_flat_hamiltonian():
    m = make_model("example1")
    x = np.zeros((2, 1))
    lam = LambdaSummary(np.zeros(1), np.ones(1))
    with pytest.raises(SingularControlError):
        minimize_alpha(m, 0.0, x, x, -np.ones((2, 1)), x, np.array([0.0]), lam, numeric=True)


def test_projected_gradient_reports_failure():
    fun = lambda a: np.sum(a * a, axis=1) * 1e6
    grad = lambda a: 2e6 * a
    with pytest.raises(OptimizationError) as info:
        projected_gradient(fun, grad, ActionSet(1), np.array([[3.0]]), max_iter=1)
    assert info.value.last_iterate is not None


def test_necessary_conditions_detect_perturbation(ex1_solution):
    m = make_model("example1")
    paths = ex1_solution.fbsde
    assert verify_necessary_conditions(m, paths).max_violation <= 1e-10
    rep = verify_necessary_conditions(m, paths, alpha=paths.alpha + 0.25)
    # strong convexity modulus alpha0^2 = 1 gives 0.25^2 / 2
    assert rep.minor_violation == pytest.approx(0.03125, rel=1e-9)
    rep0 = verify_necessary_conditions(m, paths, alpha0=paths.alpha0 + 0.25)
    assert rep0.major_violation == pytest.approx(0.03125, rel=1e-9)
    assert not rep0.passed
