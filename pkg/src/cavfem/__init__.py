"""Quadratic iso-parametric FEM for radially symmetric cavitation in 2-D."""

from cavfem.energy import MaterialModel
from cavfem.meshgen import MeshConfig, build_mesh, build_schedule

__all__ = ["MaterialModel", "MeshConfig", "build_mesh", "build_schedule"]
__version__ = "0.1.0"
