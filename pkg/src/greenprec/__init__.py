"""Learned Green's-function preconditioners for elliptic PDE solvers.

The package discretizes convection-diffusion-reaction operators, learns
their Green's function with an adaptive multiscale neural kernel, compresses
the learned kernel into a sparse approximate inverse or a hierarchical
matrix, and uses the result as a preconditioner inside flexible GMRES.

All numerics run in double precision; the JAX 64-bit flag is set on import.
"""

import jax

jax.config.update("jax_enable_x64", True)

from . import compress, config, krylov, msnn, pde, train  # noqa: E402,F401

__version__ = "0.1.0"
