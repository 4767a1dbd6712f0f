"""Approximations of the fundamental solution q_t(x, y) and checks of its bounds."""

from .estimate import (
    DriftUnavailable,
    KernelEstimate,
    kernel_max,
    kernel_value,
    load_kernel,
    log_gradient,
    log_horizontal_gradient,
    save_kernel,
    time_derivative,
)
from .grid import CFLError, InstabilityError, generator_matrix, grid_kernel_pair, solve_heat_grid
from .kde import mc_kde_kernel, scott_bandwidth
from .bounds import BoundFitReport, check_gaussian_bounds, on_diagonal_exponent
