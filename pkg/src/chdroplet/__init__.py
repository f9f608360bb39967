"""Stochastic Cahn-Hilliard droplets: radial profiles, slow-manifold spectra,
Fermi coordinates, the reduced center SDE and Monte Carlo stability runs."""

__version__ = "0.1.0"

from .errors import (ChDropletError, Diverged, IllConditioned, NewtonDiverged, NoBracket,
                     NoConvergence, NonzeroMean, NotInTube, OutOfDomain, RootFindFailure, Singular)
from .spectral import Grid, energy, inv_laplacian_zero_mean, laplacian, mass, norm_hm1
from .droplet import DropletFamily, DropletState, RadialProfile, build_droplet, solve_radial_profile
from .linearization import (EigenStructure, LinearizedOperator, coefficient_matrices,
                            leading_eigenpairs, tangent_alignment)
from .spde import NoiseSpec, SolverConfig, Stepper, sample_increment, spde_step
from .fermi import (FermiDecomposition, FrameCache, assemble_A, diffusion_fields, drift_vector,
                    project_to_manifold, reduced_sde_step)
from .config import ExperimentConfig
