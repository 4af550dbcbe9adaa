"""Recurrent models on the Cholesky space of SPD matrices with tangent-space ODE dynamics.

Submodules
----------
geometry      log-Cholesky metric, exp/log maps, closed-form means, group law
spd_oracle    affine-invariant SPD geometry and Karcher flow (testing only)
encoder       convolutional features to shrinkage covariances to Cholesky factors
rgru          gated recurrent cell on Cholesky factors
manifold_ode  Euler solver in the identity chart, unrolled and adjoint gradients
model         end-to-end model, losses, training loop, checkpoints
data          datasets, CSV I/O, observation dropping, synthetic data, metrics
verify        acceptance battery
cli           command-line interface
"""
from ._version import __version__
from .errors import ConfigError, DataError, NumericalError

__all__ = ["__version__", "ConfigError", "DataError", "NumericalError"]
