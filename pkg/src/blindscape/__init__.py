"""Blind deconvolution MAP estimation with pluggable image priors.

The package bundles the forward model (circular convolution with
parameterized blur kernels), analytic and external image priors, exact
flow-based likelihood evaluation, posterior-landscape probes, recovery
condition checks, and the alternating MAP solvers, all behind a batch CLI.
"""

__version__ = "0.1.0"

from .grids import (
    CgResult,
    ConvOperator,
    ImageGrid,
    Kernel,
    NumericBreakdownError,
    SingularOperatorError,
    adjoint_convolve,
    cg_solve,
    convolve,
    find_tikhonov_lambda,
    prox_data_fidelity,
    regularized_inverse,
)
from .kernels import (
    FamilyConfig,
    JacobianResult,
    KernelSpec,
    kernel_jacobian,
    make_kernel,
    simplex_project,
    zernike_psf,
)
from .priors import (
    DiffusionSchedule,
    GmmPrior,
    PriorModel,
    SpectralQuadraticPrior,
    flow_velocity,
)

__all__ = [
    "CgResult",
    "ConvOperator",
    "DiffusionSchedule",
    "FamilyConfig",
    "GmmPrior",
    "ImageGrid",
    "JacobianResult",
    "Kernel",
    "KernelSpec",
    "NumericBreakdownError",
    "PriorModel",
    "SingularOperatorError",
    "SpectralQuadraticPrior",
    "adjoint_convolve",
    "cg_solve",
    "convolve",
    "find_tikhonov_lambda",
    "flow_velocity",
    "kernel_jacobian",
    "make_kernel",
    "prox_data_fidelity",
    "regularized_inverse",
    "simplex_project",
    "zernike_psf",
]
