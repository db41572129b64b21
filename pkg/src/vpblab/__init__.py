"""Desk-scale numerical laboratory for the Vlasov-Poisson-Boltzmann system
near a global Maxwellian, for angular-cutoff soft potentials."""

__version__ = "0.1.0"

from .grids import VelocityGrid, WeightSpec, build_grid, maxwellian, weight_w
from .collision import (KernelConfig, CollisionOperator, assemble_operator,
                        compute_nu, load_kernel, save_kernel, load_or_assemble)
from .macromicro import (MacroProjector, MacroState, MomentTensors,
                         project_P, split_P0_P1, moments_theta_lambda)
from .modal import (EnergySpec, ModalState, ModalTrace, DecayCurve, RateFit,
                    modal_rhs, evolve_mode, verify_lyapunov, rho,
                    build_neutral_data, run_decay_experiment, fit_decay_rate,
                    calibrate_energy_spec)
from .nonlinear import (NonlinearConfig, NonlinearSolver, FieldState,
                        harmonic_data, track_X)
from .config import ExperimentConfig, parse_config, ConfigError
