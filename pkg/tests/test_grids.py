import numpy as np
import pytest

from vpblab.grids import (VelocityGrid, WeightSpec, build_grid, maxwellian,
                          weight_w, weight_time_derivative,
                          weight_time_identity_residual)
from vpblab.oracles import weight_reference


def test_corner_lattice():
    g = build_grid(1.0, 2)
    assert g.size == 8
    assert np.allclose(np.abs(g.nodes), 1.0)
    assert np.allclose(g.weights, g.weights[0])


def test_maxwellian_mass_at_defaults():
    g = build_grid(6.0, 16)
    mass = np.sum(g.weights * maxwellian(g.nodes))
    assert abs(mass - 1.0) <= 1e-6
    assert g.tol_mass == 1e-6


def test_negation_symmetry():
    for R, n in ((6.0, 16), (4.5, 6), (5.0, 7)):
        g = build_grid(R, n)
        p = g.negation_index()
        assert np.array_equal(g.nodes[p], -g.nodes)
        assert np.all(g.weights > 0)


def test_gaussian_moment_drift_at_defaults():
    g = build_grid(6.0, 16)
    M = maxwellian(g.nodes)
    m2 = np.sum(g.weights * g.nodes[:, 0] ** 2 * M)
    m4 = np.sum(g.weights * np.sum(g.nodes ** 2, axis=1) ** 2 * M)
    assert abs(m2 - 1.0) <= 1e-4
    assert abs(m4 - 15.0) <= 1e-3


def test_build_grid_rejects_bad_arguments():
    with pytest.raises(ValueError):
        build_grid(0.0, 8)
    with pytest.raises(ValueError):
        build_grid(6.0, 1)


def test_maxwellian_values_and_rotation():
    assert maxwellian(np.zeros(3)) == pytest.approx((2 * np.pi) ** -1.5)
    assert maxwellian(np.array([1.0, 0, 0])) == pytest.approx(
        (2 * np.pi) ** -1.5 * np.exp(-0.5))
    # any rotation: value depends on |xi| only
    v = np.array([0.3, -1.2, 2.0])
    r = np.linalg.norm(v)
    assert maxwellian(v) == pytest.approx(maxwellian(np.array([r, 0.0, 0.0])))


def test_weight_trivial_cases():
    spec = WeightSpec(tau=0.0, q=0.0, lam=0.0)
    assert weight_w(spec, 0.0, np.zeros(3)) == 1.0
    assert weight_w(spec, 7.3, np.array([2.0, 1.0, -4.0])) == 1.0
    spec2 = WeightSpec(tau=0.0, q=0.01, lam=0.02)
    assert weight_w(spec2, 0.0, np.zeros(3)) == pytest.approx(np.exp(0.03))


def test_weight_against_extended_precision():
    spec = WeightSpec(tau=-2.0, q=0.01, lam=0.02, theta=0.25, gamma=-1.0)
    xi = (2.0, 0.0, 0.0)
    ours = weight_w(spec, 3.0, np.array(xi))
    ref = weight_reference(-2.0, 0.01, 0.02, 0.25, -1.0, 3.0, xi)
    assert ours == pytest.approx(ref, rel=1e-14)


def test_weight_monotone_in_time_and_tau_ordering():
    spec = WeightSpec(tau=-2.0, q=0.01, lam=0.03, theta=0.2, gamma=-1.0)
    xi = np.array([1.5, -0.5, 2.0])
    ts = np.linspace(0.0, 20.0, 30)
    vals = np.array([weight_w(spec, t, xi) for t in ts])
    assert np.all(np.diff(vals) <= 0)
    # smaller tau with gamma < 0 gives a pointwise larger weight
    lo = weight_w(spec.with_tau(-3.0), 1.0, xi)
    hi = weight_w(spec.with_tau(-2.0), 1.0, xi)
    assert lo >= hi


def test_weight_time_identity():
    spec = WeightSpec(tau=-1.0, q=0.02, lam=0.04, theta=0.25, gamma=-1.5)
    for xi, t, g in (((0.0, 0.0, 0.0), 1.0, 2.0),
                     ((2.0, -1.0, 1.0), 1.0, -0.7),
                     ((6.0, 0.0, 0.0), 0.5, 1.0)):
        xi = np.array(xi)
        r = weight_time_identity_residual(spec, t, xi, g)
        assert r <= 1e-6 * abs(weight_w(spec, t, xi) * g)


def test_weight_identity_lambda_zero_is_exact():
    spec = WeightSpec(tau=-1.0, q=0.02, lam=0.0, theta=0.25, gamma=-1.0)
    xi = np.array([1.0, 2.0, -1.0])
    assert weight_time_derivative(spec, 2.0, xi) == 0.0
    assert weight_time_identity_residual(spec, 2.0, xi, 3.0) <= 1e-14


def test_weight_spec_bounds():
    with pytest.raises(ValueError):
        WeightSpec(q=0.06)
    with pytest.raises(ValueError):
        WeightSpec(lam=0.2)
    with pytest.raises(ValueError):
        WeightSpec(theta=0.3)
    with pytest.raises(ValueError):
        WeightSpec(gamma=0.5)
