"""Macro-micro decomposition: the projection onto the five collision
invariants, its hyperbolic/parabolic split, the high-order moment
functionals, and residual checks of the fluid-type moment system.

The five basis functions {sqM, xi_i sqM, (|xi|^2-3) sqM} are only
approximately orthogonal under grid quadrature, so the projector is built
from their Gram matrix.  That restores exact idempotence and exact
quadrature-orthogonality of Pu against the micro remainder at any
resolution; the returned (a, b, c) are the coefficients of Pu in this basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import VelocityGrid, maxwellian


@dataclass
class MacroState:
    """Fluid fields of one velocity profile: Pu = [a + b.xi + c(|xi|^2-3)] sqM.
    Complex-valued in modal (per-Fourier-mode) context."""

    a: complex
    b: np.ndarray
    c: complex

    def as_vector(self):
        return np.concatenate([[self.a], np.atleast_1d(self.b), [self.c]])


@dataclass
class MomentTensors:
    """Second/third order moment functionals: theta is symmetric 3x3,
    lam a 3-vector."""

    theta: np.ndarray
    lam: np.ndarray


class MacroProjector:
    """Gram-corrected projector P onto span{sqM, xi_i sqM, (|xi|^2-3) sqM}
    and the moment functionals Theta, Lambda on a fixed grid."""

    def __init__(self, grid: VelocityGrid):
        self.grid = grid
        xi = grid.nodes
        sqm = np.sqrt(maxwellian(xi))
        xx = np.sum(xi * xi, axis=1)
        self.sqm = sqm
        # columns: the five invariant basis functions
        self.basis = np.stack(
            [sqm, xi[:, 0] * sqm, xi[:, 1] * sqm, xi[:, 2] * sqm, (xx - 3.0) * sqm],
            axis=1,
        )
        wB = grid.weights[:, None] * self.basis
        self.gram = self.basis.T @ wB
        self.gram_inv = np.linalg.inv(self.gram)
        self._wB = wB  # weights-scaled basis, for moment extraction
        # raw moment weights (plain quadrature moments, no Gram correction)
        self._theta_w = np.empty((3, 3, grid.size))
        for i in range(3):
            for j in range(3):
                self._theta_w[i, j] = (xi[:, i] * xi[:, j] - (1.0 if i == j else 0.0)) * sqm
        self._lam_w = 0.1 * (xx[None, :] - 5.0) * xi.T * sqm[None, :]

    def coefficients(self, u) -> np.ndarray:
        """Gram coefficients (a, b1, b2, b3, c) of the projection of u."""
        return self.gram_inv @ (self._wB.T @ u)

    def project(self, u):
        """Split u into (MacroState, Pu, micro)."""
        coef = self.coefficients(u)
        Pu = self.basis @ coef
        return MacroState(a=coef[0], b=coef[1:4], c=coef[4]), Pu, u - Pu

    def micro(self, u):
        return u - self.basis @ self.coefficients(u)

    def micro_matrix(self, A):
        """Apply I - P to every column of a matrix (linear, so columnwise)."""
        return A - self.basis @ (self.gram_inv @ (self._wB.T @ A))

    def micro_sandwich(self, A):
        """(I-P) A (I-P) for an operator matrix A acting on nodal vectors;
        the projector is quadrature-self-adjoint, so the result is
        W-symmetric whenever A is."""
        left = self.micro_matrix(A)
        return left - (left @ self.basis) @ (self.gram_inv @ self._wB.T)

    def raw_moments(self, u) -> np.ndarray:
        """Plain quadrature moments (<sqM,u>, <xi_i sqM,u>, (1/6)<(|xi|^2-3)sqM,u>).

        These are the double-integral identities defining (a, b, c); for the
        Gram-projected Pu they coincide with the moments of u exactly.
        """
        m = self._wB.T @ u
        m[4] /= 6.0
        return m

    def split_P0_P1(self, ms: MacroState):
        """Hyperbolic part P0u = a sqM and parabolic part
        P1u = [b.xi + c(|xi|^2-3)] sqM; their sum is Pu exactly."""
        P0u = ms.a * self.basis[:, 0]
        P1u = self.basis[:, 1:4] @ np.atleast_1d(ms.b) + ms.c * self.basis[:, 4]
        return P0u, P1u

    def moments_theta_lambda(self, v) -> MomentTensors:
        """Theta_ij(v) = <(xi_i xi_j - delta_ij) sqM, v>,
        Lambda_i(v) = (1/10) <(|xi|^2-5) xi_i sqM, v>."""
        w = self.grid.weights
        theta = np.tensordot(self._theta_w, w * v, axes=([2], [0]))
        lam = self._lam_w @ (w * v)
        return MomentTensors(theta=theta, lam=lam)


def project_P(grid: VelocityGrid, u):
    return MacroProjector(grid).project(u)


def split_P0_P1(grid: VelocityGrid, ms: MacroState):
    return MacroProjector(grid).split_P0_P1(ms)


def moments_theta_lambda(grid: VelocityGrid, v) -> MomentTensors:
    return MacroProjector(grid).moments_theta_lambda(v)


def _central_dt(series, dt):
    """Second-order centered time derivative of a sampled series (axis 0);
    returned for the interior stamps [1:-1]."""
    arr = np.asarray(series)
    return (arr[2:] - arr[:-2]) / (2.0 * dt)


def fluid_residual_modal(proj: MacroProjector, apply_L, k, times, uhats):
    """Residuals of the linear fluid-type moment system for one Fourier mode.

    times must be uniformly spaced with at least 3 samples; uhats is the
    matching sequence of velocity profiles.  Time derivatives use centered
    differences, spatial derivatives are the exact multipliers i*k.  Returns
    a dict of per-equation max residual magnitudes over interior stamps.
    The Poisson row is constitutive (phi_hat := -a_hat/|k|^2), reported
    as an exact zero for visibility.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        raise ValueError("need at least 3 uniformly spaced samples for the time stencil")
    dts = np.diff(times)
    if not np.allclose(dts, dts[0], rtol=1e-10, atol=0.0):
        raise ValueError("time stamps must be uniformly spaced")
    dt = dts[0]
    k = np.asarray(k, dtype=float)
    k2 = float(k @ k)

    n_t = len(times)
    mom = np.array([proj.raw_moments(u) for u in uhats])  # (n_t, 5)
    a, b, c = mom[:, 0], mom[:, 1:4], mom[:, 4]
    theta = np.empty((n_t, 3, 3), dtype=complex)
    lam = np.empty((n_t, 3), dtype=complex)
    theta_r = np.empty_like(theta)
    lam_r = np.empty_like(lam)
    xi_dot_k = proj.grid.nodes @ k
    for s, u in enumerate(uhats):
        micro = proj.micro(u)
        mt = proj.moments_theta_lambda(micro)
        theta[s], lam[s] = mt.theta, mt.lam
        r = -1j * xi_dot_k * micro + apply_L(u)
        mr = proj.moments_theta_lambda(r)
        theta_r[s], lam_r[s] = mr.theta, mr.lam

    phi = -a / k2
    i_ = slice(1, -1)

    res_a = _central_dt(a, dt) + 1j * (b[i_] @ k)
    res_b = (_central_dt(b, dt)
             + 1j * np.outer(a[i_] + 2.0 * c[i_], k)
             + 1j * np.einsum("i,sij->sj", k, theta[i_])
             - 1j * np.outer(phi[i_], k))
    res_c = (_central_dt(c, dt)
             + (1j / 3.0) * (b[i_] @ k)
             + (5j / 3.0) * (lam[i_] @ k))
    res_theta = (_central_dt(theta, dt)
                 + 1j * (k[:, None] * b[i_][:, None, :] + k[None, :] * b[i_][:, :, None])
                 - (2j / 3.0) * np.eye(3)[None] * (b[i_] @ k)[:, None, None]
                 - (10j / 3.0) * np.eye(3)[None] * (lam[i_] @ k)[:, None, None]
                 - theta_r[i_])
    res_lam = _central_dt(lam, dt) + 1j * np.outer(c[i_], k) - lam_r[i_]
    res_poisson = -k2 * phi - a

    def mx(x):
        return float(np.max(np.abs(x))) if np.size(x) else 0.0

    return {
        "continuity": mx(res_a),
        "momentum": mx(res_b),
        "energy": mx(res_c),
        "theta": mx(res_theta),
        "lambda": mx(res_lam),
        "poisson": mx(res_poisson),
    }
