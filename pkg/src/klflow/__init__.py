"""klflow: convex optimization over probability distributions by implicit
KL proximal descent, realized with affine-coupling normalizing flows."""

from . import autodiff, baselines, flows, functionals, simplex, solver

__all__ = ["autodiff", "flows", "functionals", "solver", "simplex", "baselines"]
__version__ = "0.1.0"
