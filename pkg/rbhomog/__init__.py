"""Reduced-basis surrogates of homogenized hyperelastic stress fields.

Snapshots of microscopic stress fields are compressed with a POD basis and
the basis coefficients are regressed with Gaussian processes; the resulting
model replaces nested RVE solves in two-scale simulations.
"""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConfigError,
    DegenerateDataError,
    DivergenceError,
    ExtrapolationWarning,
    FitError,
    FormatError,
    IllConditionedError,
    InvertedElementError,
    MeshError,
    MeshMismatchError,
    RbhomogError,
)
from .mesh import Mesh, MeshSpec, build_mesh  # noqa: E402
from .micro_fem import solve_rve  # noqa: E402
from .surrogate import SurrogateModel, load_model, train  # noqa: E402

__all__ = [
    "__version__",
    "ConfigError",
    "DegenerateDataError",
    "DivergenceError",
    "ExtrapolationWarning",
    "FitError",
    "FormatError",
    "IllConditionedError",
    "InvertedElementError",
    "MeshError",
    "MeshMismatchError",
    "RbhomogError",
    "Mesh",
    "MeshSpec",
    "build_mesh",
    "solve_rve",
    "SurrogateModel",
    "load_model",
    "train",
]
