"""Relaxed densities: cell problems for the quasiconvex envelope and the jump density."""

from .cell import CellProblemConfig, DensityEstimate, qtf, qtf_recession, tangent_basis
from .jump import JumpConfig, JumpSpec, geodesic_dist, jump_k, nu_dependence, profile_energy

__all__ = ["CellProblemConfig", "DensityEstimate", "qtf", "qtf_recession", "tangent_basis",
           "JumpConfig", "JumpSpec", "geodesic_dist", "jump_k", "nu_dependence", "profile_energy"]
