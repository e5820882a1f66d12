"""Preconditioned neural posterior estimation.

A short adaptive SMC ABC run filters the parameter space, an unconditional
spline flow fitted to the surviving particles becomes the proposal for
neural posterior estimation, and truncation-based rounds refine the result.
"""

from pnpe.core import BoxPrior, RngState, as_generator, prior_logpdf, prior_sample

__version__ = "0.1.0"

__all__ = [
    "BoxPrior",
    "RngState",
    "as_generator",
    "prior_logpdf",
    "prior_sample",
]
