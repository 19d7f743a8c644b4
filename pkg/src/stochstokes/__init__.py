"""Finite element and spectral discretizations of the periodic stochastic Stokes equations.

The package couples a Taylor-Hood mixed finite element Euler-Maruyama
solver on a periodic criss-cross mesh with a Fourier-Galerkin reference
integrator driven by the same Brownian paths, and a Monte Carlo harness that
estimates strong error moments, time-averaged pressure errors and their
convergence rates.
"""
from .fem import MixedField, TaylorHood, discrete_lbb_constant, l2_project, project_divfree, taylor_hood
from .harness import (
    ConfigError,
    ErrorReport,
    ExperimentConfig,
    ExperimentFailure,
    RateFit,
    compare_noise,
    converge_space,
    converge_time,
    estimate_errors,
    fit_rate,
    pathwise_stats,
)
from .linalg import SaddleSolver, SaddleSystem, factorize, solve_saddle
from .mesh import TorusMesh, build_torus_mesh, dof_counts
from .noise import BrownianDriver, NoiseModel, helmholtz_split_fem, make_driver
from .schemes import FemIntegrator, SchemeConfig, SpectralIntegrator, run_trajectory
from .spectral import SpectralField, SpectralGrid, helmholtz_split_spectral, leray_project, reference_solution

__version__ = "0.1.0"
