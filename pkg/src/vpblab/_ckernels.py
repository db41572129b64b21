"""Numba kernels for collision-operator quadrature.

The outer integral over xi_* runs on the velocity lattice, the sphere
integral uses a product rule (Gauss-Legendre per half-interval in cos(theta)
because the cutoff cross-section |cos| has a kink at zero, uniform midpoints
in phi).  Because every term of the integrand is invariant under
omega -> -omega, only the cos(theta) > 0 half is evaluated, with doubled
weights; this is exact for an even azimuthal count.

Gain terms evaluate the unknown at the post-collision points.  Two stencil
schemes are provided:

* GAIN_LINEAR: trilinear stencil applied to u directly (column scale 1).
* GAIN_SPLIT_QUAD: the integrand is first reduced with the collision-energy
  identity sqM(xi'_*) sqM(xi') = sqM(xi_*) sqM(xi), leaving the smooth ratio
  v = u / sqM to be interpolated by a triquadratic stencil (column scale
  1/sqM).  This reproduces all five collision invariants exactly up to box
  clipping.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

GAIN_LINEAR = 0
GAIN_SPLIT_QUAD = 1

_SQM0 = (2.0 * np.pi) ** -0.75   # peak of the root-Maxwellian


@njit(cache=True, inline="always")
def _frame(e3x, e3y, e3z):
    """Orthonormal pair completing e3; branch keeps the cross product stable."""
    if abs(e3x) < 0.9:
        ux, uy, uz = 1.0, 0.0, 0.0
    else:
        ux, uy, uz = 0.0, 1.0, 0.0
    e1x = uy * e3z - uz * e3y
    e1y = uz * e3x - ux * e3z
    e1z = ux * e3y - uy * e3x
    nr = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    e1x /= nr; e1y /= nr; e1z /= nr
    e2x = e3y * e1z - e3z * e1y
    e2y = e3z * e1x - e3x * e1z
    e2z = e3x * e1y - e3y * e1x
    return e1x, e1y, e1z, e2x, e2y, e2z


@njit(cache=True, inline="always")
def _scatter_linear(row, cf, tx, ty, tz, R, h, n, colscale):
    fx = (tx + R) / h
    fy = (ty + R) / h
    fz = (tz + R) / h
    ix = min(int(fx), n - 2)
    iy = min(int(fy), n - 2)
    iz = min(int(fz), n - 2)
    rx = fx - ix; ry = fy - iy; rz = fz - iz
    for a in range(2):
        wa = rx if a == 1 else 1.0 - rx
        for b in range(2):
            wb = ry if b == 1 else 1.0 - ry
            wab = wa * wb
            for c in range(2):
                wc = rz if c == 1 else 1.0 - rz
                col = ((ix + a) * n + (iy + b)) * n + (iz + c)
                row[col] += cf * wab * wc * colscale[col]


@njit(cache=True, inline="always")
def _scatter_quadratic(row, cf, tx, ty, tz, R, h, n, colscale):
    fx = (tx + R) / h
    fy = (ty + R) / h
    fz = (tz + R) / h
    ix = min(max(int(fx + 0.5), 1), n - 2)
    iy = min(max(int(fy + 0.5), 1), n - 2)
    iz = min(max(int(fz + 0.5), 1), n - 2)
    rx = fx - ix; ry = fy - iy; rz = fz - iz
    wx = (0.5 * rx * (rx - 1.0), (1.0 - rx) * (1.0 + rx), 0.5 * rx * (rx + 1.0))
    wy = (0.5 * ry * (ry - 1.0), (1.0 - ry) * (1.0 + ry), 0.5 * ry * (ry + 1.0))
    wz = (0.5 * rz * (rz - 1.0), (1.0 - rz) * (1.0 + rz), 0.5 * rz * (rz + 1.0))
    for a in range(3):
        for b in range(3):
            wab = wx[a] * wy[b]
            for c in range(3):
                col = ((ix + a - 1) * n + (iy + b - 1)) * n + (iz + c - 1)
                row[col] += cf * wab * wz[c] * colscale[col]


@njit(cache=True)
def _k_row(i, nodes, w, sqm, colscale, h, R, n, gamma, cq,
           mu, cphi, sphi, wom, mode, Krow):
    """One row of the raw gain/loss matrix; returns (kept, clipped)
    coefficient mass for the clipping report.  The self pair j == i is
    excluded; its analytic ball correction is added on the diagonal by the
    caller, consistently with the collision frequency."""
    N = nodes.shape[0]
    nom = mu.shape[0]
    xi0 = nodes[i, 0]; xi1 = nodes[i, 1]; xi2 = nodes[i, 2]
    kept = 0.0
    clipped = 0.0
    for j in range(N):
        if j == i:
            continue
        dx = xi0 - nodes[j, 0]; dy = xi1 - nodes[j, 1]; dz = xi2 - nodes[j, 2]
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        e3x = dx / d; e3y = dy / d; e3z = dz / d
        e1x, e1y, e1z, e2x, e2y, e2z = _frame(e3x, e3y, e3z)
        base = w[j] * d ** gamma * cq * sqm[j]
        csplit = base * sqm[j] * sqm[i]
        lossc = 0.0
        for m in range(nom):
            mm = mu[m]
            s = np.sqrt(max(0.0, 1.0 - mm * mm))
            ox = mm * e3x + s * (cphi[m] * e1x + sphi[m] * e2x)
            oy = mm * e3y + s * (cphi[m] * e1y + sphi[m] * e2y)
            oz = mm * e3z + s * (cphi[m] * e1z + sphi[m] * e2z)
            dmu = d * mm
            px = xi0 - dmu * ox; py = xi1 - dmu * oy; pz = xi2 - dmu * oz
            qx = nodes[j, 0] + dmu * ox; qy = nodes[j, 1] + dmu * oy; qz = nodes[j, 2] + dmu * oz
            aw = wom[m] * mm            # mu > 0 half only: |cos(theta)| = mu
            lossc += base * aw
            if mode == GAIN_LINEAR:
                sqmp = np.exp(-0.25 * (px * px + py * py + pz * pz)) * _SQM0
                sqmq = np.exp(-0.25 * (qx * qx + qy * qy + qz * qz)) * _SQM0
                cf1 = base * aw * sqmq
                cf2 = base * aw * sqmp
            else:
                cf1 = csplit * aw
                cf2 = cf1
            if -R <= px <= R and -R <= py <= R and -R <= pz <= R:
                kept += cf1
                if mode == GAIN_LINEAR:
                    _scatter_linear(Krow, cf1, px, py, pz, R, h, n, colscale)
                else:
                    _scatter_quadratic(Krow, cf1, px, py, pz, R, h, n, colscale)
            else:
                clipped += cf1
            if -R <= qx <= R and -R <= qy <= R and -R <= qz <= R:
                kept += cf2
                if mode == GAIN_LINEAR:
                    _scatter_linear(Krow, cf2, qx, qy, qz, R, h, n, colscale)
                else:
                    _scatter_quadratic(Krow, cf2, qx, qy, qz, R, h, n, colscale)
            else:
                clipped += cf2
        Krow[j] -= lossc * sqm[i]
    return kept, clipped


@njit(cache=True, parallel=True)
def assemble_k_raw(nodes, w, sqm, colscale, h, R, n, gamma, cq,
                   mu, cphi, sphi, wom, mode):
    """Raw (unsymmetrized) gain/loss matrix, parallel over rows.
    Returns (K, kept_mass, clipped_mass)."""
    N = nodes.shape[0]
    K = np.zeros((N, N))
    kept = np.zeros(N)
    clipped = np.zeros(N)
    for i in prange(N):
        kept[i], clipped[i] = _k_row(
            i, nodes, w, sqm, colscale, h, R, n, gamma, cq,
            mu, cphi, sphi, wom, mode, K[i],
        )
    return K, kept.sum(), clipped.sum()


@njit(cache=True, parallel=True)
def assemble_gamma_tensor(nodes, w, sqm, colscale, h, R, n, gamma, cq,
                          mu, cphi, sphi, wom, mode):
    """Dense bilinear tensor T with Gamma(f, g)[i] = sum_ab T[i,a,b] f_a g_b.

    Same quadrature as the K assembly.  The gain term carries
    sqM(xi_*) f(xi'_*) g(xi'); in split mode both post-collision factors are
    interpolated as ratios against sqM, using the energy identity for the
    exact Maxwellian weight.  The loss term is diagonal in g and nodal in f.
    Only feasible on small grids (memory N^3).
    """
    N = nodes.shape[0]
    nom = mu.shape[0]
    T = np.zeros((N, N, N))
    for i in prange(N):
        xi0 = nodes[i, 0]; xi1 = nodes[i, 1]; xi2 = nodes[i, 2]
        fw = np.empty(27)
        fc = np.empty(27, dtype=np.int64)
        gw = np.empty(27)
        gc = np.empty(27, dtype=np.int64)
        for j in range(N):
            if j == i:
                continue
            dx = xi0 - nodes[j, 0]; dy = xi1 - nodes[j, 1]; dz = xi2 - nodes[j, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            e3x = dx / d; e3y = dy / d; e3z = dz / d
            e1x, e1y, e1z, e2x, e2y, e2z = _frame(e3x, e3y, e3z)
            base = w[j] * d ** gamma * cq * sqm[j]
            for m in range(nom):
                mm = mu[m]
                s = np.sqrt(max(0.0, 1.0 - mm * mm))
                ox = mm * e3x + s * (cphi[m] * e1x + sphi[m] * e2x)
                oy = mm * e3y + s * (cphi[m] * e1y + sphi[m] * e2y)
                oz = mm * e3z + s * (cphi[m] * e1z + sphi[m] * e2z)
                dmu = d * mm
                px = xi0 - dmu * ox; py = xi1 - dmu * oy; pz = xi2 - dmu * oz
                qx = nodes[j, 0] + dmu * ox; qy = nodes[j, 1] + dmu * oy; qz = nodes[j, 2] + dmu * oz
                aw = wom[m] * mm
                # loss: -B sqM(xi_*) f(xi_*) g(xi)
                T[i, j, i] -= base * aw
                if not (-R <= px <= R and -R <= py <= R and -R <= pz <= R):
                    continue
                if not (-R <= qx <= R and -R <= qy <= R and -R <= qz <= R):
                    continue
                if mode == GAIN_LINEAR:
                    cf = base * aw
                    ng = _stencil_linear(px, py, pz, R, h, n, colscale, gw, gc)
                    nf = _stencil_linear(qx, qy, qz, R, h, n, colscale, fw, fc)
                else:
                    # B sqM(xi_*) [sqM(xi'_*) sqM(xi')] v_f(xi'_*) v_g(xi')
                    cf = base * aw * sqm[j] * sqm[i]
                    ng = _stencil_quadratic(px, py, pz, R, h, n, colscale, gw, gc)
                    nf = _stencil_quadratic(qx, qy, qz, R, h, n, colscale, fw, fc)
                for a in range(nf):
                    cfa = cf * fw[a]
                    ca = fc[a]
                    for b in range(ng):
                        T[i, ca, gc[b]] += cfa * gw[b]
    return T


@njit(cache=True, inline="always")
def _stencil_linear(tx, ty, tz, R, h, n, colscale, wout, cout):
    fx = (tx + R) / h
    fy = (ty + R) / h
    fz = (tz + R) / h
    ix = min(int(fx), n - 2)
    iy = min(int(fy), n - 2)
    iz = min(int(fz), n - 2)
    rx = fx - ix; ry = fy - iy; rz = fz - iz
    p = 0
    for a in range(2):
        wa = rx if a == 1 else 1.0 - rx
        for b in range(2):
            wb = ry if b == 1 else 1.0 - ry
            for c in range(2):
                wc = rz if c == 1 else 1.0 - rz
                col = ((ix + a) * n + (iy + b)) * n + (iz + c)
                wout[p] = wa * wb * wc * colscale[col]
                cout[p] = col
                p += 1
    return p


@njit(cache=True, inline="always")
def _stencil_quadratic(tx, ty, tz, R, h, n, colscale, wout, cout):
    fx = (tx + R) / h
    fy = (ty + R) / h
    fz = (tz + R) / h
    ix = min(max(int(fx + 0.5), 1), n - 2)
    iy = min(max(int(fy + 0.5), 1), n - 2)
    iz = min(max(int(fz + 0.5), 1), n - 2)
    rx = fx - ix; ry = fy - iy; rz = fz - iz
    wx = (0.5 * rx * (rx - 1.0), (1.0 - rx) * (1.0 + rx), 0.5 * rx * (rx + 1.0))
    wy = (0.5 * ry * (ry - 1.0), (1.0 - ry) * (1.0 + ry), 0.5 * ry * (ry + 1.0))
    wz = (0.5 * rz * (rz - 1.0), (1.0 - rz) * (1.0 + rz), 0.5 * rz * (rz + 1.0))
    p = 0
    for a in range(3):
        for b in range(3):
            wab = wx[a] * wy[b]
            for c in range(3):
                col = ((ix + a - 1) * n + (iy + b - 1)) * n + (iz + c - 1)
                wout[p] = wab * wz[c] * colscale[col]
                cout[p] = col
                p += 1
    return p
