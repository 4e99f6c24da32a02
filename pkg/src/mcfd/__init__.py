"""Monte Carlo / finite-difference backward scheme for fully nonlinear
parabolic PDEs."""

from .nonlinearity import NonlinearOperator, check_domination, monotonicity_transform
from .regression import LocalBasisConfig, fit_local_basis, malliavin_estimate, truncate_estimate
from .sde import DiffusionSpec, ParticleCloud, simulate_cloud
from .solver import (
    GridConfig,
    SolverConfig,
    TruncationConfig,
    apply_one_step,
    backward_solve_grid,
    backward_solve_particles,
    estimate_rate,
    truncation_bound,
)

__version__ = "0.1.0"
