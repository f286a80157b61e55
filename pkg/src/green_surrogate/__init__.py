"""Learned Green's functions for 2D reaction-diffusion operators.

The pieces, bottom to top: grids and fields (grid), the five-point
discrete operator with Jacobi and dense solvers (operator), Gaussian
point-source mollifiers and training datasets (source), the U-Net
surrogate (model), the residual/Jacobi/data losses with their sweep-count
schedules (losses), the training loop (trainer), and the quadrature-based
Dirichlet BVP solver that consumes either a reference or a learned
Green's function (greensolver). The cli module ties them together.
"""

__version__ = "0.1.0"

from .grid import Field, Grid, RectDomain, build_grid, l2_error, read_field, write_field
from .operator import (
    CoefficientSpec,
    StencilCoeffs,
    apply_Lh,
    build_stencil,
    custom_coefficients,
    direct_solve,
    get_coefficients,
    jacobi_solve,
    jacobi_step,
)

__all__ = [
    "Field", "Grid", "RectDomain", "build_grid", "l2_error", "read_field", "write_field",
    "CoefficientSpec", "StencilCoeffs", "apply_Lh", "build_stencil", "custom_coefficients",
    "direct_solve", "get_coefficients", "jacobi_solve", "jacobi_step",
    "__version__",
]
