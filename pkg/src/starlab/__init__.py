"""starlab: a from-scratch laboratory for gradient propagation in deep
stacked recurrent networks — five cell types with analytic forward/backward
passes, fixed-point Jacobian spectra, Monte-Carlo gradient-magnitude fields
over the unrolled depth x time lattice, and desk-scale training on
long-memory tasks.
"""

__version__ = "0.1.0"

from .cells import CellKind, CellParams, backward, forward, init_params, jacobians_at, param_count
from .lattice import (GradientField, Lattice, LossMode, StackSpec,
                      backward_sequence, build, forward_sequence)
from .numerics import Rng, gaussian_matrix, mean_singular_value, orthogonal_matrix, singular_values

__all__ = [
    "CellKind", "CellParams", "GradientField", "Lattice", "LossMode", "Rng",
    "StackSpec", "backward", "backward_sequence", "build", "forward",
    "forward_sequence", "gaussian_matrix", "init_params", "jacobians_at",
    "mean_singular_value", "orthogonal_matrix", "param_count", "singular_values",
    "__version__",
]
