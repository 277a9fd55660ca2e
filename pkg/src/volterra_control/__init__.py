"""Stochastic Volterra equations with completely monotone kernels: finite
Markovian lifts, forward simulation, BSDE value functions, and feedback
control synthesis."""

__version__ = "0.1.0"

from .kernels import (
    BernsteinMeasure,
    DiscreteKernel,
    FractionalKernel,
    ShiftedFractionalKernel,
    alpha_index,
    check_shifted_cm,
    discretize,
    eval_kernel,
    finite_mixture,
    fit_error,
    laplace,
)

__all__ = [
    "BernsteinMeasure",
    "DiscreteKernel",
    "FractionalKernel",
    "ShiftedFractionalKernel",
    "alpha_index",
    "check_shifted_cm",
    "discretize",
    "eval_kernel",
    "finite_mixture",
    "fit_error",
    "laplace",
    "__version__",
]
