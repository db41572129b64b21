import numpy as np
import pytest

from vpblab.grids import build_grid, maxwellian
from vpblab.macromicro import MacroProjector, fluid_residual_modal
from vpblab.modal import ModalState, evolve_mode


@pytest.fixture(scope="module")
def grid():
    return build_grid(6.0, 12)


@pytest.fixture(scope="module")
def proj(grid):
    return MacroProjector(grid)


def test_project_sqm(proj):
    ms, Pu, micro = proj.project(proj.sqm)
    assert ms.a == pytest.approx(1.0, abs=1e-12)
    assert np.abs(ms.b).max() <= 1e-12
    assert abs(ms.c) <= 1e-12
    assert np.abs(micro).max() <= 1e-12


def test_project_xi_squared(proj, grid):
    u = np.sum(grid.nodes ** 2, axis=1) * proj.sqm
    ms, _, micro = proj.project(u)
    # |xi|^2 sqM = 3 sqM + (|xi|^2 - 3) sqM exactly on the lattice
    assert ms.a == pytest.approx(3.0, abs=1e-10)
    assert ms.c == pytest.approx(1.0, abs=1e-10)
    assert np.abs(ms.b).max() <= 1e-10
    assert np.abs(micro).max() <= 1e-9


def test_idempotence_and_orthogonality(proj, grid, rng):
    for _ in range(5):
        u = rng.standard_normal(grid.size)
        _, Pu, micro = proj.project(u)
        _, PPu, _ = proj.project(Pu)
        assert np.abs(PPu - Pu).max() <= 1e-12 * max(np.abs(Pu).max(), 1.0)
        assert abs(np.sum(grid.weights * Pu * micro)) <= 1e-12


def test_raw_moment_identity(proj, grid, rng):
    # a, b, c recomputed from the reconstructed Pu match the originals
    u = rng.standard_normal(grid.size)
    ms, Pu, _ = proj.project(u)
    m_u = proj.raw_moments(u)
    m_Pu = proj.raw_moments(Pu)
    assert np.allclose(m_u, m_Pu, rtol=0, atol=1e-13 * np.abs(m_u).max())


def test_split_P0_P1(proj, rng):
    u = rng.standard_normal(proj.grid.size)
    ms, Pu, _ = proj.project(u)
    P0u, P1u = proj.split_P0_P1(ms)
    assert np.abs(P0u + P1u - Pu).max() <= 1e-14 * np.abs(Pu).max()
    # hyperbolic-only state has no parabolic part
    ms2, _, _ = proj.project(proj.sqm)
    _, P1z = proj.split_P0_P1(ms2)
    assert np.abs(P1z).max() <= 1e-12
    # quadrature orthogonality of the two parts (odd/even moments)
    ip = abs(np.sum(proj.grid.weights * P0u * P1u))
    assert ip <= 1e-4 * proj.grid.norm(P0u) * max(proj.grid.norm(P1u), 1e-30)


def test_micro_orthogonal_to_invariants(proj, rng):
    for _ in range(10):
        u = rng.standard_normal(proj.grid.size)
        micro = proj.micro(u)
        content = proj.basis.T @ (proj.grid.weights * micro)
        assert np.abs(content).max() <= 1e-10


def test_moments_on_sqm(proj):
    mt = proj.moments_theta_lambda(proj.sqm)
    assert np.abs(mt.theta).max() <= 1e-4
    assert np.abs(mt.lam).max() <= 1e-12


def test_moments_on_xi1xi2(proj, grid):
    v = grid.nodes[:, 0] * grid.nodes[:, 1] * proj.sqm
    mt = proj.moments_theta_lambda(v)
    assert mt.theta[0, 1] == pytest.approx(1.0, abs=2e-4)
    assert mt.theta[1, 0] == pytest.approx(1.0, abs=2e-4)
    mask = ~np.eye(3, dtype=bool)
    off = mt.theta.copy()
    off[0, 1] = off[1, 0] = 0.0
    assert np.abs(off).max() <= 2e-4
    assert np.abs(mt.lam).max() <= 1e-12
    assert np.array_equal(mt.theta, mt.theta.T)


def test_moments_on_c_mode_and_b_mode(proj, grid):
    xx = np.sum(grid.nodes ** 2, axis=1)
    v = (xx - 3.0) * proj.sqm
    mt = proj.moments_theta_lambda(v)
    assert np.allclose(mt.theta, 2.0 * np.eye(3), atol=5e-4)
    v2 = grid.nodes[:, 0] * proj.sqm
    mt2 = proj.moments_theta_lambda(v2)
    assert abs(mt2.lam[0]) <= 1e-4     # (1/10)(5 - 5) = 0 up to drift


def test_lambda_and_theta_on_macro_subspace(proj, rng):
    # Lambda annihilates the macro subspace; Theta sees only the c-mode
    for _ in range(5):
        coef = rng.standard_normal(5)
        Pu = proj.basis @ coef
        mt = proj.moments_theta_lambda(Pu)
        assert np.abs(mt.lam).max() <= 1e-3 * max(np.abs(coef).max(), 1.0)
        expected = 2.0 * coef[4] * np.eye(3)
        assert np.abs(mt.theta - expected).max() <= 2e-3 * max(np.abs(coef).max(), 1.0)


def test_fluid_residual_static_maxwellian(small_op):
    proj = small_op.projector
    times = np.array([0.0, 0.1, 0.2, 0.3])
    zero = np.zeros(small_op.grid.size, dtype=complex)
    res = fluid_residual_modal(proj, small_op.apply_L, [1.0, 0.0, 0.0],
                               times, [zero] * 4)
    assert all(v == 0.0 for v in res.values())


def test_fluid_residual_convergence_order(decay_op, rng):
    """Centered-difference residuals fall by ~4x when the sampling interval
    halves (the trace is integrated far below the stencil spacing; lattice
    moment drift puts a small floor under the higher-moment rows)."""
    op = decay_op
    k = np.array([1.0, 0.0, 0.0])
    e = op.projector.basis
    micro = op.projector.micro(rng.standard_normal(op.grid.size))
    u0 = (0.4 * e[:, 0] + 0.3 * e[:, 1] + 0.25 * e[:, 4] + 0.5 * micro).astype(complex)

    def residuals(sample_dt):
        stamps = np.arange(0.0, 1.0 + 1e-12, sample_dt)
        tr = evolve_mode(op, ModalState(k=k, uhat=u0), stamps[-1],
                         stamps=stamps, record_steps=False)
        return fluid_residual_modal(op.projector, op.apply_L, k,
                                    tr.stamp_times, tr.stamp_states)

    r_coarse = residuals(0.2)
    r_fine = residuals(0.1)
    for eq in ("continuity", "momentum", "energy", "theta", "lambda"):
        ratio = r_coarse[eq] / max(r_fine[eq], 1e-300)
        assert 2.5 <= ratio <= 6.0, f"{eq}: ratio {ratio}"
    assert r_fine["poisson"] <= 1e-14


def test_fluid_residual_rejects_short_or_uneven_traces(small_op):
    proj = small_op.projector
    z = np.zeros(small_op.grid.size, dtype=complex)
    with pytest.raises(ValueError):
        fluid_residual_modal(proj, small_op.apply_L, [1, 0, 0], [0.0, 0.1], [z, z])
    with pytest.raises(ValueError):
        fluid_residual_modal(proj, small_op.apply_L, [1, 0, 0],
                             [0.0, 0.1, 0.35], [z, z, z])
