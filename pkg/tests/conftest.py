import os
from pathlib import Path

import numpy as np
import pytest

from vpblab.collision import KernelConfig, load_or_assemble
from vpblab.grids import build_grid

# kernel caches persist across sessions; assembly of the fine grids is the
# expensive step and its artifacts are deterministic
CACHE_DIR = Path(os.environ.get("VPBLAB_TEST_CACHE",
                                Path(__file__).resolve().parent.parent / ".vpb-cache"))


def cached_operator(R, n, gamma=-1.0, n_omega=16, gain="split_quadratic",
                    repair=True, clip=0.05):
    grid = build_grid(R, n)
    conf = KernelConfig(gamma=gamma, n_omega=n_omega, gain_interp=gain,
                        repair=repair, clip_tolerance=clip)
    op, _ = load_or_assemble(grid, conf, CACHE_DIR)
    return op


@pytest.fixture(scope="session")
def small_op():
    """216-node operator: cheap enough for dense oracles and the Gamma tensor."""
    return cached_operator(4.5, 6, n_omega=8, gain="linear", clip=0.3)


@pytest.fixture(scope="session")
def decay_op():
    """The shipped decay-reference kernel (coarse, linear gains)."""
    return cached_operator(5.4, 10, n_omega=16, gain="linear", clip=0.2)


@pytest.fixture(scope="session")
def lyap_op():
    """Small kernel used for the per-mode Lyapunov sweeps."""
    return cached_operator(5.4, 8, n_omega=8, gain="linear", clip=0.2)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
