"""Command-line surface: configuration, orchestration, caching, reporting.

Subcommands:

    assemble-kernel   build or load the collision kernel cache
    spectrum          coercivity and null-space report for the kernel
    modal-run         evolve a single Fourier mode, write its trace
    decay             full decay experiment over the k-grid (m = 0 and 1)
    nonlinear-run     periodic nonlinear run with energy diagnostics
    verify            invariant suite; nonzero exit on any hard failure
    report            merge run manifests into one summary JSON

All artifacts are plain CSV/JSON; identical config + seed reproduce them
bit for bit (per-mode arithmetic is sequential and merges are in fixed
k-grid order).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .collision import KernelConfig, load_or_assemble
from .config import ConfigError, ExperimentConfig, echo, parse_config, validate
from .grids import build_grid
from .modal import (DataProfile, EnergySpec, ModalState, build_neutral_data,
                    calibrate_energy_spec, evolve_mode, fit_decay_rate,
                    run_decay_experiment, verify_lyapunov, weighted_decay_bound,
                    ModalFunctionals)
from .nonlinear import (NonlinearConfig, NonlinearSolver, eps_initial,
                        harmonic_data, track_X)


def _fmt(x) -> str:
    """Shortest round-trip decimal for bit-stable CSV output."""
    return repr(float(x))


def write_csv(path, columns: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    rows = len(next(iter(columns.values())))
    with open(path, "w") as f:
        f.write(",".join(names) + "\n")
        for i in range(rows):
            f.write(",".join(_fmt(columns[c][i]) for c in names) + "\n")


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=1, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def make_manifest(cfg: ExperimentConfig, command: str, started: float,
                  constants: dict, artifacts: list[str]) -> dict:
    return {
        "tool": "vpblab", "tool_version": __version__,
        "command": command,
        "config": json.loads(json.dumps(asdict(cfg))),
        "config_hash": cfg.config_hash(),
        "constants": constants,
        "wall_seconds": time.time() - started,
        "artifacts": sorted(artifacts),
    }


def _kernel(cfg: ExperimentConfig, quiet: bool = False):
    grid = build_grid(cfg.R, cfg.n)
    kconf = KernelConfig(gamma=cfg.gamma, c_q=cfg.c_q, n_omega=cfg.n_omega,
                         gain_interp=cfg.gain_interp, repair=cfg.repair,
                         clip_tolerance=cfg.clip_tolerance)
    op, hit = load_or_assemble(grid, kconf, cfg.cache_dir)
    if not quiet:
        src = "cache hit" if hit else "assembled"
        print(f"kernel {op.info.config_hash}: {src} "
              f"({grid.size} nodes, gamma={cfg.gamma}, n_omega={cfg.n_omega})")
    return op, hit


def _kgrid(cfg: ExperimentConfig) -> np.ndarray:
    return np.geomspace(cfg.k_min, cfg.k_max, cfg.k_count)


# -- subcommands --------------------------------------------------------


def cmd_assemble_kernel(cfg: ExperimentConfig, args) -> int:
    op, hit = _kernel(cfg)
    print(json.dumps({"cache_hit": hit, **asdict(op.info)}, sort_keys=True,
                     indent=1, default=_json_default))
    return 0


def cmd_spectrum(cfg: ExperimentConfig, args) -> int:
    started = time.time()
    op, _ = _kernel(cfg)
    kappa0 = op.estimate_coercivity()
    sing = op.null_space_singulars(8)
    from .collision import fit_nu_bounds
    c1, c2 = fit_nu_bounds(op.grid, op.nu, cfg.gamma)
    out = {
        "kappa0_hat": kappa0,
        "null_singulars": sing,
        "null_gap_ratio": float(sing[5] / max(sing[4], 1e-300)),
        "nu_bounds": [c1, c2],
        "assembly": asdict(op.info),
    }
    path = Path(cfg.output_dir) / "spectrum.json"
    write_json(path, make_manifest(cfg, "spectrum", started, out, [str(path)]))
    print(f"kappa0_hat = {kappa0:.4f}; nu in [{c1:.3f}, {c2:.3f}] x (1+|xi|)^gamma")
    print(f"wrote {path}")
    return 0


def cmd_modal_run(cfg: ExperimentConfig, args) -> int:
    started = time.time()
    op, _ = _kernel(cfg)
    kabs = args.k if args.k is not None else float(np.sqrt(cfg.k_min * cfg.k_max))
    specs = tuple(calibrate_energy_spec(op, ell, seed=cfg.seed)
                  for ell in (0.0, 1.0, 2.0))
    profile = DataProfile(neutral=cfg.neutral)
    state = build_neutral_data(op, [kabs], profile)[0]
    trace = evolve_mode(op, state, cfg.T, dt=cfg.dt or None, specs=specs)
    cols = {"t": trace.times, "l2": trace.l2, "field": trace.field,
            "e_int_re": trace.e_int_re, "micro_norm2": trace.micro_norm2}
    for ell in (0.0, 1.0, 2.0):
        cols[f"E{int(ell)}"] = trace.energies[ell]
        cols[f"D{int(ell)}"] = trace.dissipations[ell]
    out_dir = Path(cfg.output_dir)
    trace_path = out_dir / f"modal_k{kabs:g}.csv"
    write_csv(trace_path, cols)
    kappas = {f"kappa_hat_ell{int(l)}": verify_lyapunov(trace, l)[0]
              for l in (0.0, 1.0, 2.0)}
    manifest = make_manifest(cfg, "modal-run", started,
                             {"k": kabs, **kappas,
                              "energy_specs": [asdict(s) for s in specs]},
                             [str(trace_path)])
    write_json(out_dir / f"modal_k{kabs:g}.json", manifest)
    print(f"mode |k|={kabs:g}: " + ", ".join(f"{k}={v:.4g}" for k, v in kappas.items()))
    return 0


def cmd_decay(cfg: ExperimentConfig, args) -> int:
    started = time.time()
    op, _ = _kernel(cfg)
    kgrid = _kgrid(cfg)
    profile = DataProfile(neutral=cfg.neutral)
    states = build_neutral_data(op, kgrid, profile)
    spec0 = calibrate_energy_spec(op, cfg.ell, seed=cfg.seed)
    curves, traces = run_decay_experiment(
        op, states, cfg.T, ell=cfg.ell, m_values=(0, 1),
        threads=cfg.threads, specs=(spec0,))
    out_dir = Path(cfg.output_dir)
    artifacts = []
    fits = {}
    for m, curve in curves.items():
        path = out_dir / f"decay_m{m}.csv"
        write_csv(path, {"t": curve.times, "norm": curve.values,
                         "part_u": curve.part_u, "part_field": curve.part_field})
        artifacts.append(str(path))
        fit = fit_decay_rate(curve, (cfg.fit_lo, cfg.fit_hi))
        fits[f"sigma_hat_m{m}"] = fit.sigma_hat
        fits[f"residual_m{m}"] = fit.residual
    # envelope verification with the calibrated constants
    kappa_hats = [verify_lyapunov(tr, cfg.ell)[0] for tr in traces]
    kappa_min = float(min(kappa_hats))
    eps = cfg.eps_envelope or min(max(kappa_min, 1e-6) / (8.0 * cfg.J), 1.0)
    fx = ModalFunctionals(op)
    env = weighted_decay_bound(traces, fx, spec0, ell0=cfg.J + cfg.p - 1.0,
                               eps=eps, J=cfg.J, p=cfg.p)
    constants = {
        **fits, "kappa_hat_min": kappa_min, "envelope_eps": eps,
        "envelope_C": env["C_global"], "envelope_spread": env["spread"],
        "tail_fraction": curves[0].tail_fraction,
        "energy_spec": asdict(spec0), "neutral": cfg.neutral,
    }
    rate_path = out_dir / "rate_fit.json"
    write_json(rate_path, make_manifest(cfg, "decay", started, constants,
                                        artifacts + [str(rate_path)]))
    for m in sorted(curves):
        print(f"sigma_hat (m={m}) = {fits[f'sigma_hat_m{m}']:.4f}")
    print(f"Lyapunov kappa_hat_min = {kappa_min:.4g}; envelope C = {env['C_global']:.4g} "
          f"(spread {env['spread']:.2f})")
    print(f"wrote {rate_path}")
    return 0


def cmd_nonlinear_run(cfg: ExperimentConfig, args) -> int:
    started = time.time()
    op, _ = _kernel(cfg)
    nlc = NonlinearConfig(ell=cfg.ell_nl, n_derivs=cfg.n_derivs, q=cfg.q,
                          lam=cfg.lam, theta=cfg.theta, eps0=cfg.eps0)
    solver = NonlinearSolver(op, cfg.n_x, cfg.L_x, nlc)
    state0 = harmonic_data(solver, cfg.eps0, seed=cfg.seed)
    trace = solver.evolve(state0, cfg.T_nl, dt=cfg.dt or None)
    eps = eps_initial(solver, state0.u, ell0=cfg.ell0)
    X, X_ratio = track_X(trace, eps)
    out_dir = Path(cfg.output_dir)
    path = out_dir / "nonlinear_trace.csv"
    write_csv(path, {"t": trace.times, "mass": trace.mass,
                     "E": trace.E, "D": trace.D, "X": X,
                     "energy_l2": trace.energy_l2,
                     "grad_phi": trace.grad_phi, "grad2_phi": trace.grad2_phi,
                     "gamma_invariant": trace.gamma_invariant})
    mass_drift = float(np.max(np.abs(trace.mass - trace.mass[0])))
    constants = {
        "energy_constants": asdict(trace.constants),
        "eps_initial": eps,
        "mass_drift_abs": mass_drift,
        "mass_drift_rel": mass_drift / max(abs(cfg.eps0), 1e-300),
        "X_final_ratio": float(X_ratio[-1]),
        "max_E_increase": float(np.max(np.maximum(np.diff(trace.E), 0.0), initial=0.0)),
    }
    mpath = out_dir / "nonlinear_manifest.json"
    write_json(mpath, make_manifest(cfg, "nonlinear-run", started, constants,
                                    [str(path), str(mpath)]))
    print(f"mass drift {mass_drift:.3e} (rel {constants['mass_drift_rel']:.3e}); "
          f"X/eps^2 final = {constants['X_final_ratio']:.3g}")
    print(f"wrote {path}")
    return 0


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    """Fast invariant suite on the configured kernel plus small-grid
    dual-route checks; one line per check, nonzero exit on hard failure."""
    from . import verifysuite
    results = verifysuite.run_suite(cfg)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    out_dir = Path(cfg.output_dir)
    manifests = []
    for p in sorted(out_dir.glob("*.json")):
        if p.name == "summary.json":
            continue
        try:
            manifests.append({"file": p.name, **json.loads(p.read_text())})
        except json.JSONDecodeError:
            print(f"skipping unreadable manifest {p}", file=sys.stderr)
    summary = {"runs": manifests, "count": len(manifests)}
    path = out_dir / "summary.json"
    write_json(path, summary)
    print(f"wrote {path} ({len(manifests)} manifests)")
    return 0


COMMANDS = {
    "assemble-kernel": cmd_assemble_kernel,
    "spectrum": cmd_spectrum,
    "modal-run": cmd_modal_run,
    "decay": cmd_decay,
    "nonlinear-run": cmd_nonlinear_run,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vpblab",
        description="Desk-scale Vlasov-Poisson-Boltzmann laboratory")
    ap.add_argument("--config", type=str, default=None,
                    help="INI config file (defaults used when omitted)")
    ap.add_argument("--seed", type=int, default=None, help="override output.seed")
    ap.add_argument("--threads", type=int, default=None,
                    help="override output.threads (env VPBLAB_THREADS)")
    ap.add_argument("--cache-dir", type=str, default=None,
                    help="override output.cache_dir (env VPBLAB_CACHE_DIR)")
    ap.add_argument("--strict", action=argparse.BooleanOptionalAction,
                    default=True, help="reject unknown config keys")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "modal-run":
            sp.add_argument("--k", type=float, default=None,
                            help="wavenumber magnitude of the single mode")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, strict=args.strict) \
            if args.config else ExperimentConfig()
    except (ConfigError, FileNotFoundError) as exc:
        print(exc, file=sys.stderr)
        return 2
    if not args.config:
        problems = validate(cfg)
        if problems:
            print("\n".join(problems), file=sys.stderr)
            return 2
    if args.seed is not None:
        cfg.seed = args.seed
    threads = args.threads or os.environ.get("VPBLAB_THREADS")
    if threads is not None:
        cfg.threads = int(threads)
    cache = args.cache_dir or os.environ.get("VPBLAB_CACHE_DIR")
    if cache is not None:
        cfg.cache_dir = cache
    print(f"# vpblab {args.command} (config hash {cfg.config_hash()})")
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    raise SystemExit(main())
