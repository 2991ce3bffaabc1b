"""Fixed-boundary ideal-MHD equilibria from neural-network mode profiles.

The radial profiles of the stellarator-symmetric Fourier modes of the
inverse coordinate map (R, lambda, Z) are parametrized by small two-layer
networks; the volume-wide nonlinear force residual is minimized directly on
a collocation grid with a first-order stage followed by a quasi-Newton
stage.
"""

from .mhdkernel import CollocationGrid, FieldState, JacobianSignError
from .netfield import MU0, EquilibriumInput, NetParams
from .solver import Solution, SolverConfig, solve
from .spectral import ModeSet, SurfaceCoefficients, build_mode_set

__version__ = "0.1.0"

__all__ = [
    "CollocationGrid",
    "FieldState",
    "JacobianSignError",
    "MU0",
    "EquilibriumInput",
    "NetParams",
    "Solution",
    "SolverConfig",
    "solve",
    "ModeSet",
    "SurfaceCoefficients",
    "build_mode_set",
    "__version__",
]
