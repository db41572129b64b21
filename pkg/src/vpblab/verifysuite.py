"""Invariant suite behind the `verify` subcommand.

Each check returns (name, passed, detail).  The suite combines cheap exact
identities, operator-quality gates on the configured kernel, and dual-route
oracle comparisons on a small desk grid, so a green run certifies both the
build and the environment.
"""

from __future__ import annotations

import numpy as np

from .collision import KernelConfig, assemble_operator, load_or_assemble
from .config import ExperimentConfig
from .grids import WeightSpec, build_grid, maxwellian, weight_w, \
    weight_time_identity_residual
from .macromicro import MacroProjector
from .modal import (ModalState, assemble_modal_generator, build_neutral_data,
                    DataProfile, calibrate_energy_spec, evolve_mode,
                    modal_rhs, verify_lyapunov)


def _small_op(gamma: float):
    grid = build_grid(4.5, 6)
    conf = KernelConfig(gamma=gamma, n_omega=8, gain_interp="linear", clip_tolerance=0.3)
    return assemble_operator(grid, conf)


def run_suite(cfg: ExperimentConfig):
    checks = []
    rng = np.random.default_rng(cfg.seed)

    # grid-level identities
    grid = build_grid(cfg.R, cfg.n)
    perm = grid.negation_index()
    ok = np.array_equal(grid.nodes[perm], -grid.nodes) and np.all(grid.weights > 0)
    checks.append(("grid symmetry and positivity",
                   bool(ok), f"mass defect {grid.mass_defect:.2e}"))
    M = maxwellian(grid.nodes)
    m2 = float(np.sum(grid.weights * grid.nodes[:, 0] ** 2 * M))
    m4 = float(np.sum(grid.weights * np.sum(grid.nodes ** 2, axis=1) ** 2 * M))
    checks.append(("Gaussian moment drift",
                   abs(m2 - 1.0) <= 1e-4 and abs(m4 - 15.0) <= 1e-3,
                   f"<xi1^2>={m2:.6f}, <|xi|^4>={m4:.5f}"))

    spec = WeightSpec(tau=-2.0, q=min(cfg.q, 0.05), lam=max(cfg.lam, 1e-3),
                      theta=cfg.theta, gamma=cfg.gamma)
    xi = np.array([2.0, -1.0, 0.5])
    ts = np.linspace(0.0, 9.0, 10)
    vals = [float(weight_w(spec, t, xi)) for t in ts]
    mono = all(a >= b * (1 - 1e-14) for a, b in zip(vals, vals[1:]))
    resid = weight_time_identity_residual(spec, 1.0, xi, 1.3)
    rel = resid / abs(float(weight_w(spec, 1.0, xi)) * 1.3)
    checks.append(("weight monotone in t and time identity",
                   mono and rel <= 1e-6, f"identity residual {rel:.2e}"))

    proj = MacroProjector(grid)
    u = rng.standard_normal(grid.size)
    _, Pu, micro = proj.project(u)
    _, PPu, _ = proj.project(Pu)
    idem = float(np.abs(PPu - Pu).max())
    orth = abs(float(np.sum(grid.weights * Pu * micro)))
    checks.append(("projector idempotent and orthogonal",
                   idem <= 1e-12 and orth <= 1e-10,
                   f"idem {idem:.2e}, orth {orth:.2e}"))

    # configured kernel gates
    kconf = KernelConfig(gamma=cfg.gamma, c_q=cfg.c_q, n_omega=cfg.n_omega,
                         gain_interp=cfg.gain_interp, repair=cfg.repair,
                         clip_tolerance=cfg.clip_tolerance)
    op, hit = load_or_assemble(grid, kconf, cfg.cache_dir)
    info = op.info
    checks.append(("kernel null-space leakage",
                   info.leakage <= 5e-3,
                   f"shipped {info.leakage:.2e} (raw {info.raw_leakage:.2e}, "
                   f"{'cache' if hit else 'fresh'})"))
    checks.append(("kernel symmetry after symmetrization",
                   info.sym_residual_post <= 1e-10,
                   f"post {info.sym_residual_post:.2e}, pre {info.sym_residual_pre:.2e}"))
    worst = -np.inf
    for _ in range(200):
        v = rng.standard_normal(grid.size)
        worst = max(worst, float(np.sum(grid.weights * v * op.apply_L(v))
                                 / np.sum(grid.weights * v * v)))
    checks.append(("L non-positive on random states",
                   worst <= 1e-8, f"max <u,Lu>/<u,u> = {worst:.2e}"))
    try:
        kappa0 = op.estimate_coercivity()
        checks.append(("coercivity on micro subspace",
                       kappa0 > 1e-2, f"kappa0_hat = {kappa0:.4f}"))
    except ValueError as exc:
        checks.append(("coercivity on micro subspace", False, str(exc)))
    sing = op.null_space_singulars(6)
    gap = float(sing[5] / max(sing[4], 1e-300))
    checks.append(("null space is five-dimensional",
                   gap >= 1e2, f"gap ratio {gap:.2e}"))

    # small-grid dual-route checks
    sop = _small_op(cfg.gamma)
    sqm = sop.projector.sqm
    g0 = sop.gamma(sqm, sqm, conserve=False)
    scale = sop.nu_norm(sqm)
    # the defect is the gain-stencil interpolation error, O(h^2) at this grid
    checks.append(("Gamma(sqM, sqM) vanishes at interpolation order",
                   sop.grid.norm(g0) <= 0.6 * scale,
                   f"|Gamma|/|nu^1/2 sqM| = {sop.grid.norm(g0) / scale:.2e}"))
    worst_cons = 0.0
    for _ in range(20):
        v = rng.standard_normal(sop.grid.size)
        gv = sop.gamma(v, v)
        worst_cons = max(worst_cons, float(np.max(np.abs(
            sop.projector.basis.T @ (sop.grid.weights * gv)))))
    checks.append(("Gamma conservation (projected)",
                   worst_cons <= 1e-8, f"max invariant content {worst_cons:.2e}"))
    f1, f2, g = (rng.standard_normal(sop.grid.size) for _ in range(3))
    lin = sop.gamma(2.0 * f1 + 3.0 * f2, g) - 2.0 * sop.gamma(f1, g) - 3.0 * sop.gamma(f2, g)
    checks.append(("Gamma bilinearity",
                   sop.grid.norm(lin) <= 1e-12 * max(sop.grid.norm(sop.gamma(f1, g)), 1e-30),
                   f"linearity defect {sop.grid.norm(lin):.2e}"))

    k = np.array([1.0, 0.0, 0.0])
    B = assemble_modal_generator(sop, k)
    v = rng.standard_normal(sop.grid.size) + 1j * rng.standard_normal(sop.grid.size)
    direct = modal_rhs(sop, ModalState(k=k, uhat=v))
    matv = B @ v
    rel = sop.grid.norm(direct - matv) / sop.grid.norm(matv)
    checks.append(("modal rhs against assembled generator",
                   rel <= 1e-12, f"relative {rel:.2e}"))

    espec = calibrate_energy_spec(sop, 1.0, seed=cfg.seed, n_probes=100)
    ok_lyap = True
    worst_k = None
    for kabs in (0.3, 1.5):
        st = build_neutral_data(sop, [kabs], DataProfile())[0]
        tr = evolve_mode(sop, st, 4.0, specs=(espec,))
        kap, _ = verify_lyapunov(tr, 1.0)
        if kap <= 0:
            ok_lyap = False
            worst_k = kabs
    checks.append(("per-mode Lyapunov decay",
                   ok_lyap, "kappa_hat > 0 at k in {0.3, 1.5}" if ok_lyap
                   else f"kappa_hat <= 0 at k={worst_k}"))
    return checks
