"""Linearized collision operator L = -nu + K and the bilinear term Gamma.

Assembly pipeline:

1. collision frequency nu by lattice quadrature with an analytic ball
   correction replacing the singular self-cell (finite for gamma > -3);
2. raw K from the three-term gain/loss quadrature (numba, row-parallel),
   with the matching self-cell correction on the diagonal so the singular
   contributions cancel exactly inside L;
3. symmetrization in the quadrature inner product (residual recorded);
4. exact null-space repair: L is conjugated by the Gram micro-projector,
   which zeroes the action on the five collision invariants to roundoff
   while preserving quadrature symmetry.  The pre-repair leakage is kept in
   the metadata as the honest measure of quadrature quality.

Two gain stencils are supported (see _ckernels): "split_quadratic" attains
invariant leakage at the 1e-4 level before any repair and is the default;
"linear" is the simplest bounded scheme and the recommended choice for very
coarse grids, where the split scheme's tail columns can destabilize the
symmetrized spectrum.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import _ckernels
from .grids import VelocityGrid, build_grid, maxwellian
from .macromicro import MacroProjector

FORMAT_VERSION = 1
CACHE_MAGIC = b"VPBK"

GAIN_MODES = {"linear": _ckernels.GAIN_LINEAR,
              "split_quadratic": _ckernels.GAIN_SPLIT_QUAD}


@dataclass(frozen=True)
class KernelConfig:
    """Cross-section and quadrature parameters.

    gamma in [-3, 0): kernel |xi - xi_*|^gamma; the guaranteed range is
    [-2, 0), softer values are accepted with a warning.  The angular factor
    is q0(theta) = c_q |cos theta|.  n_omega is the per-factor order of the
    product sphere rule (n_omega x n_omega).  gain_interp selects the gain
    stencil, repair the exact null-space correction.
    """

    gamma: float = -1.0
    c_q: float = 1.0
    n_omega: int = 16
    gain_interp: str = "split_quadratic"
    repair: bool = True
    clip_tolerance: float = 0.05

    def __post_init__(self):
        if not -3.0 <= self.gamma < 0.0:
            raise ValueError(f"gamma must lie in [-3, 0), got {self.gamma}")
        if not 0.0 < self.clip_tolerance <= 1.0:
            raise ValueError(f"clip_tolerance must lie in (0, 1], got {self.clip_tolerance}")
        if self.gamma < -2.0:
            warnings.warn(
                f"gamma={self.gamma} is outside the guaranteed range [-2, 0) "
                "(very soft potential); proceeding without guarantees",
                stacklevel=2,
            )
        if self.c_q <= 0:
            raise ValueError(f"c_q must be positive, got {self.c_q}")
        if self.n_omega < 2 or self.n_omega % 2:
            raise ValueError(f"n_omega must be even and >= 2, got {self.n_omega}")
        if self.gain_interp not in GAIN_MODES:
            raise ValueError(f"unknown gain_interp {self.gain_interp!r}")


@dataclass
class AssemblyInfo:
    """Self-reported assembly diagnostics, persisted with the kernel."""

    sym_residual_pre: float
    sym_residual_post: float
    raw_leakage: float          # max_i ||L psi_i|| / ||psi_i|| before repair
    leakage: float              # same after repair (the shipped operator)
    clipped_fraction: float     # gain coefficient mass lost to box clipping
    config_hash: str
    assembly_seconds: float
    extra: dict = field(default_factory=dict)


def sphere_rule(n_omega: int):
    """Positive-hemisphere product rule with doubled weights.

    Gauss-Legendre with n_omega/2 nodes on cos(theta) in (0, 1] (the other
    half-interval is recovered by the omega -> -omega invariance of the
    integrand), uniform midpoints in phi.  Returns (mu, cos_phi, sin_phi, w)
    flattened; sum(w * mu) == 2*pi exactly up to roundoff.
    """
    m = n_omega // 2
    x, wgl = np.polynomial.legendre.leggauss(m)
    mu1 = 0.5 * (x + 1.0)
    wmu = wgl * 0.5 * 2.0        # doubled: accounts for the mu < 0 half
    phi = (np.arange(n_omega) + 0.5) * (2.0 * np.pi / n_omega)
    wphi = np.full(n_omega, 2.0 * np.pi / n_omega)
    MU, PHI = np.meshgrid(mu1, phi, indexing="ij")
    W = np.outer(wmu, wphi)
    return MU.ravel(), np.cos(PHI).ravel(), np.sin(PHI).ravel(), W.ravel()


def self_cell_correction(grid: VelocityGrid, config: KernelConfig) -> np.ndarray:
    """Analytic contribution of the excluded self-cell: integrate
    |r|^gamma M(xi) over a ball of radius h/2 around each node and apply the
    exact angular integral of the cutoff factor (2*pi*c_q)."""
    g = config.gamma
    ball = 4.0 * np.pi * (grid.h / 2.0) ** (g + 3.0) / (g + 3.0)
    return 2.0 * np.pi * config.c_q * ball * maxwellian(grid.nodes)


def compute_nu(grid: VelocityGrid, config: KernelConfig,
               block: int = 512) -> np.ndarray:
    """Collision frequency nu_j > 0 by lattice quadrature over xi_* plus the
    self-cell correction.  The angular integral of c_q|cos| is 2*pi*c_q
    exactly, so no sphere loop is needed."""
    nodes, w = grid.nodes, grid.weights
    M = maxwellian(nodes)
    nu = self_cell_correction(grid, config).copy()
    for lo in range(0, grid.size, block):
        hi = min(lo + block, grid.size)
        d = np.linalg.norm(nodes[lo:hi, None, :] - nodes[None, :, :], axis=2)
        idx = np.arange(lo, hi)
        d[idx - lo, idx] = 1.0
        v = w[None, :] * d ** config.gamma * M[None, :]
        v[idx - lo, idx] = 0.0
        nu[lo:hi] += 2.0 * np.pi * config.c_q * v.sum(axis=1)
    if not np.all(np.isfinite(nu)) or np.any(nu <= 0):
        raise FloatingPointError("collision frequency must be finite and positive")
    return nu


def fit_nu_bounds(grid: VelocityGrid, nu: np.ndarray, gamma: float):
    """Fitted constants 0 < c1 <= c2 with c1 (1+|xi|)^gamma <= nu <= c2 (...)."""
    ratio = nu / (1.0 + np.linalg.norm(grid.nodes, axis=1)) ** gamma
    return float(ratio.min()), float(ratio.max())


class CollisionOperator:
    """Assembled nu vector and dense K matrix on a velocity grid."""

    def __init__(self, grid: VelocityGrid, config: KernelConfig,
                 nu: np.ndarray, K: np.ndarray, info: AssemblyInfo):
        self.grid = grid
        self.config = config
        self.nu = nu
        self.K = K
        self.info = info
        self.projector = MacroProjector(grid)
        self._gamma_tensor = None

    # -- linearized operator ------------------------------------------------

    def apply_L(self, u):
        """L u = -nu * u + K u (componentwise on the last-but-one axis for
        stacked right-hand sides)."""
        u = np.asarray(u)
        if u.shape[0] != self.grid.size:
            raise ValueError(
                f"state has {u.shape[0]} entries, operator expects {self.grid.size}")
        return self.K @ u - self.nu[(...,) + (None,) * (u.ndim - 1)] * u

    def apply_K(self, u):
        return self.K @ np.asarray(u)

    def nu_norm(self, u):
        """||nu^(1/2) u|| in the quadrature metric."""
        return float(np.sqrt(np.sum(self.grid.weights * self.nu * np.abs(u) ** 2)))

    # -- bilinear term ------------------------------------------------------

    def gamma_tensor(self, max_nodes: int = 400):
        """Dense bilinear tensor for Gamma; built lazily and kept.

        Memory is size^3 floats, so this is guarded to small grids; raise
        max_nodes explicitly to override.
        """
        if self._gamma_tensor is None:
            N = self.grid.size
            if N > max_nodes:
                raise MemoryError(
                    f"Gamma tensor needs {N ** 3 * 8 / 1e9:.1f} GB for {N} nodes; "
                    "use a coarser grid or raise max_nodes")
            mode = GAIN_MODES[self.config.gain_interp]
            sqm = np.sqrt(maxwellian(self.grid.nodes))
            colscale = (1.0 / sqm if mode == _ckernels.GAIN_SPLIT_QUAD
                        else np.ones_like(sqm))
            mu, cphi, sphi, wom = sphere_rule(self.config.n_omega)
            T = _ckernels.assemble_gamma_tensor(
                self.grid.nodes, self.grid.weights, sqm, colscale,
                self.grid.h, self.grid.R, self.grid.n,
                self.config.gamma, self.config.c_q,
                mu, cphi, sphi, wom, mode)
            # self-cell correction: at xi_* = xi the gain and loss integrands
            # coincide (zero momentum transfer), Q contribution cancels, so no
            # diagonal term is added for Gamma.
            self._gamma_tensor = T
        return self._gamma_tensor

    def gamma(self, f, g, conserve: bool = True):
        """Gamma(f, g) by quadrature; bilinear in (f, g).

        With conserve=True (default) the output is projected onto the
        orthogonal complement of the collision invariants, enforcing the
        mass/momentum/energy orthogonality of the continuum operator to
        roundoff.  The raw quadrature value is returned otherwise.
        """
        T = self.gamma_tensor()
        out = np.einsum("iab,a...,b...->i...", T, np.asarray(f), np.asarray(g))
        if conserve:
            out = self.projector.micro(out)
        return out

    def gamma_batch(self, F, G, conserve: bool = True):
        """Gamma applied columnwise to stacked states F, G of shape (N, m);
        contraction through one GEMM for speed."""
        T = self.gamma_tensor()
        N = self.grid.size
        FG = np.einsum("am,bm->mab", F, G).reshape(G.shape[1], N * N)
        out = (FG @ T.reshape(N, N * N).T).T
        if conserve:
            out = self.projector.micro_matrix(out)
        return out

    # -- spectrum -----------------------------------------------------------

    def estimate_coercivity(self, return_spectrum: bool = False):
        """kappa0_hat: smallest eigenvalue of -L on the micro subspace
        relative to the nu-weighted inner product (dense symmetric solve).

        Raises ValueError naming the offending node when the estimate is not
        positive (a data-quality failure of the assembled kernel).
        """
        w = self.grid.weights
        wh = np.sqrt(w)
        S = wh[:, None] * (-(self.K - np.diag(self.nu))) / wh[None, :]
        S = 0.5 * (S + S.T)
        ns = 1.0 / np.sqrt(self.nu)
        St = ns[:, None] * S * ns[None, :]
        # micro constraint <psi, u>_W = 0 in nu-scaled coordinates
        B = (ns * wh)[:, None] * self.projector.basis
        Q, _ = np.linalg.qr(B)
        St = St - Q @ (Q.T @ St) - (St @ Q) @ Q.T + Q @ ((Q.T @ St @ Q)) @ Q.T
        shift = 10.0 * float(np.abs(St).sum(axis=1).max() + 1.0)
        St += shift * (Q @ Q.T)
        evals, evecs = np.linalg.eigh(St)
        kappa0 = float(evals[0])
        if kappa0 <= 0:
            node = self.grid.nodes[int(np.argmax(np.abs(evecs[:, 0])))]
            raise ValueError(
                f"coercivity estimate {kappa0:.3e} is not positive; offending "
                f"eigenvector peaks at node {node}")
        return (kappa0, evals) if return_spectrum else kappa0

    def null_space_singulars(self, count: int = 8) -> np.ndarray:
        """Smallest singular values of -L in the symmetrized metric; the
        five invariants should sit far below the sixth value."""
        w = self.grid.weights
        wh = np.sqrt(w)
        S = wh[:, None] * (-(self.K - np.diag(self.nu))) / wh[None, :]
        S = 0.5 * (S + S.T)
        evals = np.linalg.eigvalsh(S)
        return np.sort(np.abs(evals))[:count]


def invariant_leakage(grid: VelocityGrid, nu: np.ndarray, K: np.ndarray) -> float:
    """max over the five invariants of ||L psi|| / ||psi|| (quadrature norm)."""
    proj = MacroProjector(grid)
    worst = 0.0
    for p in proj.basis.T:
        Lp = K @ p - nu * p
        worst = max(worst, grid.norm(Lp) / grid.norm(p))
    return worst


def config_hash(grid: VelocityGrid, config: KernelConfig) -> str:
    payload = json.dumps(
        {"version": FORMAT_VERSION, "gamma": config.gamma, "c_q": config.c_q,
         "R": grid.R, "n": grid.n, "n_omega": config.n_omega,
         "gain_interp": config.gain_interp, "repair": config.repair},
        sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def assemble_operator(grid: VelocityGrid, config: KernelConfig) -> CollisionOperator:
    """Full assembly pipeline; fails on non-finite entries or when the gain
    quadrature loses more than the declared clip_tolerance of its
    coefficient mass to the velocity box."""
    t0 = time.time()
    nu = compute_nu(grid, config)
    sqm = np.sqrt(maxwellian(grid.nodes))
    mode = GAIN_MODES[config.gain_interp]
    colscale = 1.0 / sqm if mode == _ckernels.GAIN_SPLIT_QUAD else np.ones_like(sqm)
    mu, cphi, sphi, wom = sphere_rule(config.n_omega)
    K, kept, clipped = _ckernels.assemble_k_raw(
        grid.nodes, grid.weights, sqm, colscale, grid.h, grid.R, grid.n,
        config.gamma, config.c_q, mu, cphi, sphi, wom, mode)
    if not np.all(np.isfinite(K)):
        raise FloatingPointError("non-finite K entries from assembly")
    clip_frac = clipped / max(kept + clipped, 1e-300)
    if clip_frac > config.clip_tolerance:
        raise ValueError(
            f"gain quadrature clipped {clip_frac:.2%} of its coefficient mass "
            f"(declared tolerance {config.clip_tolerance:.0%}); enlarge R or "
            "raise clip_tolerance")
    # consistent singular self-cell on the diagonal
    K[np.diag_indices_from(K)] += self_cell_correction(grid, config)

    # symmetrize in the quadrature inner product
    wh = np.sqrt(grid.weights)
    S = wh[:, None] * K / wh[None, :]
    nrm = np.linalg.norm(S)
    resid_pre = float(np.linalg.norm(S - S.T) / nrm)
    S = 0.5 * (S + S.T)
    K = S / wh[:, None] * wh[None, :]
    resid_post = float(np.linalg.norm(
        wh[:, None] * K / wh[None, :] - (wh[:, None] * K / wh[None, :]).T) / nrm)

    raw_leak = invariant_leakage(grid, nu, K)

    if config.repair:
        proj = MacroProjector(grid)
        K = proj.micro_sandwich(K - np.diag(nu)) + np.diag(nu)
    leak = invariant_leakage(grid, nu, K)

    info = AssemblyInfo(
        sym_residual_pre=resid_pre,
        sym_residual_post=resid_post,
        raw_leakage=raw_leak,
        leakage=leak,
        clipped_fraction=float(clip_frac),
        config_hash=config_hash(grid, config),
        assembly_seconds=time.time() - t0,
    )
    return CollisionOperator(grid, config, nu, K, info)


# -- kernel cache -----------------------------------------------------------


def save_kernel(op: CollisionOperator, path) -> None:
    """Binary cache: magic, version, JSON header, nu, K, SHA-256 checksum."""
    header = {
        "version": FORMAT_VERSION,
        "gamma": op.config.gamma, "c_q": op.config.c_q,
        "R": op.grid.R, "n": op.grid.n, "n_omega": op.config.n_omega,
        "gain_interp": op.config.gain_interp, "repair": op.config.repair,
        "tol_mass": op.grid.tol_mass,
        "info": asdict(op.info),
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    payload = hjson + op.nu.tobytes() + op.K.tobytes()
    digest = hashlib.sha256(payload).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hjson)))
        f.write(payload)
        f.write(digest)


def load_kernel(path, grid: VelocityGrid, config: KernelConfig) -> CollisionOperator:
    """Load a cached kernel; refuses on magic/version/config mismatch or
    checksum failure."""
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a kernel cache (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: format version {version} != {FORMAT_VERSION}")
    payload, digest = raw[12:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch, cache is corrupt")
    header = json.loads(payload[:hlen].decode())
    expected = {"gamma": config.gamma, "c_q": config.c_q, "R": grid.R,
                "n": grid.n, "n_omega": config.n_omega,
                "gain_interp": config.gain_interp, "repair": config.repair}
    actual = {k: header[k] for k in expected}
    if actual != expected:
        raise ValueError(
            f"{path}: cached kernel was built for {actual}, requested {expected}")
    N = grid.size
    off = hlen
    nu = np.frombuffer(payload, dtype=np.float64, count=N, offset=off).copy()
    off += N * 8
    K = np.frombuffer(payload, dtype=np.float64, count=N * N, offset=off)
    K = K.reshape(N, N).copy()
    info = AssemblyInfo(**header["info"])
    return CollisionOperator(grid, config, nu, K, info)


def load_or_assemble(grid: VelocityGrid, config: KernelConfig,
                     cache_dir) -> tuple[CollisionOperator, bool]:
    """Cache-aware assembly; returns (operator, was_cache_hit)."""
    cache_dir = Path(cache_dir)
    path = cache_dir / f"kernel_{config_hash(grid, config)}.vpbk"
    if path.exists():
        return load_kernel(path, grid, config), True
    op = assemble_operator(grid, config)
    save_kernel(op, path)
    return op, False
