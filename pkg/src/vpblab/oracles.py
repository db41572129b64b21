"""Independent reference implementations for dual-route verification.

Everything here is deliberately written in plain numpy/scipy/mpmath with
its own formulas, sharing no code with the production kernels, so that an
agreement test between the two routes is meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate

from .collision import KernelConfig, sphere_rule
from .grids import VelocityGrid, maxwellian


def nu_continuum(kabs_xi: float, gamma: float, c_q: float) -> float:
    """Continuum collision frequency at |xi| by 1D radial quadrature.

    Uses the closed angular average of |xi - xi_*|^gamma over the sphere of
    radius r = |xi_*| and integrates the Maxwellian radially.
    """
    s = float(kabs_xi)

    def shell_avg(r):
        if s < 1e-12:
            return r ** gamma
        e = gamma + 2.0
        return ((s + r) ** e - abs(s - r) ** e) / (2.0 * s * r * e)

    def integrand(r):
        return r * r * np.exp(-0.5 * r * r) * shell_avg(r)

    val, _ = integrate.quad(integrand, 0.0, 40.0, limit=400)
    return 2.0 * np.pi * c_q * 4.0 * np.pi * (2.0 * np.pi) ** -1.5 * val


def weight_reference(tau, q, lam, theta, gamma, t, xi) -> float:
    """Extended-precision evaluation of the mixed time-velocity weight."""
    import mpmath as mp
    mp.mp.dps = 50
    b2 = mp.mpf(1) + sum(mp.mpf(c) ** 2 for c in xi)
    qt = mp.mpf(q) + mp.mpf(lam) / (1 + mp.mpf(t)) ** mp.mpf(theta)
    return float(b2 ** (mp.mpf(gamma) * mp.mpf(tau) / 2) * mp.e ** (b2 * qt))


def _post_collision(xi, xis, mu, cphi, sphi):
    """Vectorized post-collision pair for fixed (xi, xis) over sphere nodes."""
    d_vec = xi - xis
    d = np.linalg.norm(d_vec)
    e3 = d_vec / d
    helper = np.array([1.0, 0.0, 0.0]) if abs(e3[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, e3)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(e3, e1)
    s = np.sqrt(np.clip(1.0 - mu ** 2, 0.0, None))
    omega = (mu[:, None] * e3[None, :]
             + s[:, None] * (cphi[:, None] * e1[None, :] + sphi[:, None] * e2[None, :]))
    transfer = (d * mu)[:, None] * omega
    return xi[None, :] - transfer, xis[None, :] + transfer, d


def _interp_weights_linear(grid: VelocityGrid, pts):
    """Trilinear stencil (columns, weights) for points inside the box."""
    n, R, h = grid.n, grid.R, grid.h
    f = (pts + R) / h
    i0 = np.minimum(f.astype(int), n - 2)
    r = f - i0
    cols = np.empty(pts.shape[:-1] + (8,), dtype=int)
    wts = np.empty(pts.shape[:-1] + (8,))
    p = 0
    for a in (0, 1):
        wa = r[..., 0] if a else 1.0 - r[..., 0]
        for b in (0, 1):
            wb = r[..., 1] if b else 1.0 - r[..., 1]
            for c in (0, 1):
                wc = r[..., 2] if c else 1.0 - r[..., 2]
                cols[..., p] = ((i0[..., 0] + a) * n + i0[..., 1] + b) * n + i0[..., 2] + c
                wts[..., p] = wa * wb * wc
                p += 1
    return cols, wts


def _interp_weights_quadratic(grid: VelocityGrid, pts):
    """Triquadratic stencil around the nearest interior node."""
    n, R, h = grid.n, grid.R, grid.h
    f = (pts + R) / h
    i0 = np.clip(np.rint(f).astype(int), 1, n - 2)
    r = f - i0
    w1d = [0.5 * r * (r - 1.0), (1.0 - r) * (1.0 + r), 0.5 * r * (r + 1.0)]
    cols = np.empty(pts.shape[:-1] + (27,), dtype=int)
    wts = np.empty(pts.shape[:-1] + (27,))
    p = 0
    for a in (0, 1, 2):
        for b in (0, 1, 2):
            for c in (0, 1, 2):
                cols[..., p] = (((i0[..., 0] + a - 1) * n + i0[..., 1] + b - 1) * n
                                + i0[..., 2] + c - 1)
                wts[..., p] = w1d[a][..., 0] * w1d[b][..., 1] * w1d[c][..., 2]
                p += 1
    return cols, wts


def k_row_reference(grid: VelocityGrid, config: KernelConfig, row: int,
                    n_omega: int | None = None) -> np.ndarray:
    """One raw row of the gain/loss matrix by direct summation (no numba),
    optionally at a refined sphere rule.  Includes the diagonal self-cell
    correction; no symmetrization, no repair."""
    nom = config.n_omega if n_omega is None else n_omega
    mu, cphi, sphi, wom = sphere_rule(nom)
    nodes, w = grid.nodes, grid.weights
    sqm = np.sqrt(maxwellian(nodes))
    xi = nodes[row]
    out = np.zeros(grid.size)
    split = config.gain_interp == "split_quadratic"
    interp = _interp_weights_quadratic if split else _interp_weights_linear
    colscale = 1.0 / sqm if split else np.ones(grid.size)
    for j in range(grid.size):
        if j == row:
            continue
        prim, secd, d = _post_collision(xi, nodes[j], mu, cphi, sphi)
        base = w[j] * d ** config.gamma * config.c_q * sqm[j]
        aw = wom * mu
        out[j] -= float(np.sum(base * aw)) * sqm[row]
        if split:
            cf1 = base * sqm[j] * sqm[row] * aw
            cf2 = cf1
        else:
            cf1 = base * aw * np.sqrt(maxwellian(secd))
            cf2 = base * aw * np.sqrt(maxwellian(prim))
        for pts, cf in ((prim, cf1), (secd, cf2)):
            inside = np.all(np.abs(pts) <= grid.R, axis=1)
            if not np.any(inside):
                continue
            cols, wts = interp(grid, pts[inside])
            np.add.at(out, cols.ravel(),
                      (cf[inside][:, None] * wts * colscale[cols]).ravel())
    # self-cell correction, consistent with the collision frequency
    g = config.gamma
    ball = 4.0 * np.pi * (grid.h / 2.0) ** (g + 3.0) / (g + 3.0)
    out[row] += 2.0 * np.pi * config.c_q * ball * maxwellian(xi)
    return out


def gamma_reference(grid: VelocityGrid, config: KernelConfig, f, g) -> np.ndarray:
    """Brute-force bilinear collision term on the same quadrature, summed
    directly over every (node, node, omega) triple; raw (no conservation
    projection)."""
    mu, cphi, sphi, wom = sphere_rule(config.n_omega)
    nodes, w = grid.nodes, grid.weights
    sqm = np.sqrt(maxwellian(nodes))
    f = np.asarray(f, dtype=float)
    g_ = np.asarray(g, dtype=float)
    split = config.gain_interp == "split_quadratic"
    interp = _interp_weights_quadratic if split else _interp_weights_linear
    vf = f / sqm if split else f
    vg = g_ / sqm if split else g_
    out = np.zeros(grid.size)
    aw = wom * mu
    for i in range(grid.size):
        xi = nodes[i]
        acc = 0.0
        for j in range(grid.size):
            if j == i:
                continue
            prim, secd, d = _post_collision(xi, nodes[j], mu, cphi, sphi)
            base = w[j] * d ** config.gamma * config.c_q * sqm[j]
            acc -= float(np.sum(base * aw)) * f[j] * g_[i]
            inside = np.all(np.abs(prim) <= grid.R, axis=1) \
                & np.all(np.abs(secd) <= grid.R, axis=1)
            if not np.any(inside):
                continue
            cp, wp = interp(grid, prim[inside])
            cs, ws = interp(grid, secd[inside])
            gv = np.sum(wp * vg[cp], axis=1)
            fv = np.sum(ws * vf[cs], axis=1)
            if split:
                coeff = base * sqm[j] * sqm[i]
            else:
                coeff = base
            acc += float(np.sum(coeff * aw[inside] * fv * gv))
        out[i] = acc
    return out


def interactive_reference(grid: VelocityGrid, uhat, micro, k,
                          kappa1: float = 1.0) -> complex:
    """Loop re-implementation of the interactive functional from its
    displayed three-bracket form."""
    w = grid.weights
    xi = grid.nodes
    sqm = np.sqrt(maxwellian(xi))
    xx = np.sum(xi * xi, axis=1)
    a = np.sum(w * sqm * uhat)
    b = np.array([np.sum(w * xi[:, i] * sqm * uhat) for i in range(3)])
    c = np.sum(w * (xx - 3.0) * sqm * uhat) / 6.0
    lam = np.array([np.sum(w * 0.1 * (xx - 5.0) * xi[:, i] * sqm * micro)
                    for i in range(3)])
    theta = np.empty((3, 3), dtype=complex)
    for i in range(3):
        for j in range(3):
            theta[i, j] = np.sum(
                w * (xi[:, i] * xi[:, j] - (1.0 if i == j else 0.0)) * sqm * micro)
    k = np.asarray(k, dtype=float)
    total = 0.0 + 0.0j
    for i in range(3):
        total += (1j * k[i] * c) * np.conj(lam[i])
    kb = sum(k[i] * b[i] for i in range(3))
    for i in range(3):
        for j in range(3):
            br = 1j * k[i] * b[j] + 1j * k[j] * b[i]
            if i == j:
                br -= (2.0 / 3.0) * 1j * kb
            total += br * np.conj(theta[i, j])
    for i in range(3):
        total += kappa1 * (1j * k[i] * a) * np.conj(b[i])
    return total / (1.0 + float(k @ k))


def coercivity_reference(op) -> float:
    """Generalized symmetric eigensolve for the micro-subspace coercivity
    constant: the quadratic forms <u, -L u>_W and <u, nu u>_W are restricted
    to an explicit orthonormal complement of the invariants and handed to
    LAPACK's pencil solver (independent of the production construction)."""
    from scipy.linalg import eigh, null_space
    grid = op.grid
    wh = np.sqrt(grid.weights)
    S = wh[:, None] * (np.diag(op.nu) - op.K) / wh[None, :]
    S = 0.5 * (S + S.T)
    Z = null_space((wh[:, None] * op.projector.basis).T)
    A = Z.T @ S @ Z
    B = Z.T @ (op.nu[:, None] * Z)
    vals = eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True,
                subset_by_index=[0, 0])
    return float(vals[0])
