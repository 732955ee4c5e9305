"""Surrogate models mapping boundary-condition layouts to nodal PDE solutions
on a fixed mesh, with the finite-element pipeline that generates their data."""

from . import autodiff, cli, fem, layers, mesh, metrics, models, sampling, training

__all__ = ["autodiff", "cli", "fem", "layers", "mesh", "metrics", "models",
           "sampling", "training"]
__version__ = "0.1.0"
