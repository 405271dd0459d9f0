"""Hydrodynamic-mode toolkit for incompressible channel flow with Navier slip.

Builds the analytical eigenmode basis of the linearized channel problem,
reduces the Navier-Stokes equation to an autonomous quadratic ODE system,
locates the critical state (Re_c, m_c), and time-evolves thermally sampled
perturbation ensembles with energy and force diagnostics.
"""

__version__ = "0.1.0"

from .basis import (ANTISYMMETRIC, SYMMETRIC, X_BRANCH, Y_BRANCH,
                    BasisSelection, BasisSet, Cell, FlowConfig, Mode, ModeKey,
                    PoiseuilleField, build_basis, build_mode, dispersion_roots,
                    expand_poiseuille, mode_eval, mode_flow_rate,
                    mode_pressure_eval, poiseuille)
from .projection import GramReport, gram_dense, gram_matrix, inner_product, project_field

__all__ = [
    "__version__",
    "ANTISYMMETRIC", "SYMMETRIC", "X_BRANCH", "Y_BRANCH",
    "BasisSelection", "BasisSet", "Cell", "FlowConfig", "Mode", "ModeKey",
    "PoiseuilleField", "build_basis", "build_mode", "dispersion_roots",
    "expand_poiseuille", "mode_eval", "mode_flow_rate", "mode_pressure_eval",
    "poiseuille",
    "GramReport", "gram_dense", "gram_matrix", "inner_product", "project_field",
]
