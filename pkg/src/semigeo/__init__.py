"""Semigeostrophic flow on conformally flat 2D domains.

Library layout mirrors the solver pipeline: grids and fields, mollification,
coefficient assembly, the frozen-coefficient elliptic solve, the Helmholtz
projection, the macro-stepper, and the diagnostics/verification harness.
The ``sg`` command line drives full scenarios.
"""

from .errors import (ConfigError, NumericalError, SemigeoError,
                     SolverDiverged, StabilityViolation, UnsupportedDomain)
from .grid import (DomainSpec, Grid, MatrixField2D, ScalarField2D,
                   VectorField2D, cofactor, curl, divergence,
                   divergence_matrix, gradient, hessian, inner, jacobian,
                   l2_norm, matrix_field, perp, scalar_field, sobolev_norm,
                   vector_field)

__all__ = [
    "ConfigError", "NumericalError", "SemigeoError", "SolverDiverged",
    "StabilityViolation", "UnsupportedDomain",
    "DomainSpec", "Grid", "ScalarField2D", "VectorField2D", "MatrixField2D",
    "scalar_field", "vector_field", "matrix_field",
    "gradient", "jacobian", "hessian", "divergence", "divergence_matrix",
    "curl", "perp", "cofactor", "inner", "l2_norm", "sobolev_norm",
]

__version__ = "0.1.0"
