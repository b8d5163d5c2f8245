import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mmfg import measure
from mmfg.errors import PreconditionError, SingularMeanError
from mmfg.measure import MeasureFlow, ParticleEnsemble


def lifted_fd(F, v, i, j, eps):
    """Lifted central difference of F at particle i, coordinate j, scaled to an L-derivative."""
    up, dn = v.copy(), v.copy()
    up[i, j] += eps
    dn[i, j] -= eps
    return v.shape[0] * (F(up) - F(dn)) / (2 * eps)


def richardson(F, v, i, j, eps=1e-3):
    return (4 * lifted_fd(F, v, i, j, eps / 2) - lifted_fd(F, v, i, j, eps)) / 3


def test_ensemble_rejects_empty_and_nonfinite():
    with pytest.raises(PreconditionError):
        ParticleEnsemble(np.zeros((0, 2)), 1)
    with pytest.raises(PreconditionError):
        ParticleEnsemble(np.array([[0.0, np.nan]]), 1)
    with pytest.raises(PreconditionError):
        ParticleEnsemble(np.zeros((3, 2)), 3)


def test_ensemble_is_read_only():
    ens = ParticleEnsemble.from_parts(np.arange(3.0), np.ones(3))
    with pytest.raises(ValueError):
        ens.particles[0, 0] = 5.0


def test_mean_and_second_moment():
    ens = ParticleEnsemble.from_parts(np.array([1.0, 3.0]), np.array([2.0, 4.0]))
    assert np.array_equal(measure.mean(ens), [2.0, 3.0])
    assert measure.mean(ens, 1)[0] == 3.0
    assert measure.second_moment(ens) == pytest.approx((1 + 4 + 9 + 16) / 2)


def test_w2_shift_and_count_mismatch():
    a = ParticleEnsemble(np.random.default_rng(0).normal(size=(50, 1)), 1)
    b = ParticleEnsemble(a.particles + 0.3, 1)
    assert measure.wasserstein2_1d(a, b, 0) == pytest.approx(0.3, abs=1e-14)
    with pytest.raises(PreconditionError):
        measure.wasserstein2_1d(a, ParticleEnsemble(np.zeros((3, 1)), 1), 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (20, 1), elements=st.floats(-10, 10)), st.floats(-5, 5))
def test_w2_is_permutation_invariant_and_translation_exact(v, c):
    a = ParticleEnsemble(v, 1)
    perm = ParticleEnsemble(v[::-1], 1)
    assert measure.wasserstein2_1d(a, perm, 0) == 0.0
    assert measure.wasserstein2_1d(a, ParticleEnsemble(v + c, 1), 0) == pytest.approx(abs(c), abs=1e-9)


def test_flow_distance():
    grid = np.linspace(0, 1, 4)
    p = np.random.default_rng(1).normal(size=(4, 10, 2))
    f = MeasureFlow(grid, p, 1)
    assert measure.flow_distance(f, MeasureFlow(grid, p[:, ::-1], 1)) == 0.0
    q = p.copy()
    q[2, :, 1] += 0.5
    assert measure.flow_distance(f, MeasureFlow(grid, q, 1)) == pytest.approx(0.5)
    with pytest.raises(PreconditionError):
        measure.flow_distance(f, MeasureFlow(grid + 0.1, p, 1))


def test_flow_grid_must_increase():
    with pytest.raises(PreconditionError):
        MeasureFlow(np.array([0.0, 0.0]), np.zeros((2, 3, 2)), 1)


def test_identity_l_derivative_is_exact_identity():
    ens = ParticleEnsemble(np.random.default_rng(2).normal(size=(7, 2)), 1)
    d = measure.l_derivative_linear(measure.identity_jacobian, ens)
    assert d.shape == (7, 2, 2)
    assert np.array_equal(d, np.broadcast_to(np.eye(2), (7, 2, 2)))


@pytest.mark.parametrize("power", [1, 2, 3])
def test_linear_functional_matches_lifted_fd(power):
    v = np.random.default_rng(3).normal(size=(12, 1)) + 0.5
    ens = ParticleEnsemble(v, 1)
    d = measure.l_derivative_linear(lambda u: power * u ** (power - 1), ens)
    F = lambda u: np.mean(u[:, 0] ** power)
    for i in range(12):
        ref = richardson(F, v, i, 0)
        assert abs(d[i, 0, 0] - ref) <= 1e-5 * max(abs(ref), 1e-12)


def test_reciprocal_mean_matches_lifted_fd():
    v = np.random.default_rng(4).uniform(0.5, 2.0, size=(9, 2))
    ens = ParticleEnsemble(v, 1)
    d = measure.l_derivative_reciprocal_mean(ens, 1)
    F = lambda u: 1.0 / np.mean(u[:, 1])
    for i in range(9):
        ref = richardson(F, v, i, 1)
        assert abs(d[i] - ref) <= 1e-5 * abs(ref)


def test_reciprocal_mean_floor():
    ens = ParticleEnsemble(np.array([[0.0, -1.0], [0.0, 1.0]]), 1)
    with pytest.raises(SingularMeanError):
        measure.l_derivative_reciprocal_mean(ens, 1)


def test_marginal_embed_pads_zeros():
    d = np.arange(6.0).reshape(3, 2)
    out = measure.marginal_embed(d, "second", (1, 2))
    assert out.shape == (3, 3)
    assert np.array_equal(out[:, 0], np.zeros(3))
    assert np.array_equal(out[:, 1:], d)
    out = measure.marginal_embed(d[:, None, :], "first", (2, 1))
    assert out.shape == (3, 1, 3) and np.array_equal(out[:, 0, 2], np.zeros(3))
    with pytest.raises(PreconditionError):
        measure.marginal_embed(d, "first", (1, 1))
    with pytest.raises(PreconditionError):
        measure.marginal_embed(d, "third", (1, 2))
