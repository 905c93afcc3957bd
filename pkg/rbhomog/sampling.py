"""Parameter-space sampling and the parameter layout of a study.

A parameter vector is ``(U11, U22, U12, mu...)``: the three independent
components of the symmetric macroscopic stretch followed by the sampled
material components. Sampling bounds for the stretch are given on U - I.
"""

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from .exceptions import ConfigError
from .tensor_mech import MaterialParams

logger = logging.getLogger(__name__)

MAX_SOBOL_DIMENSION = 21
STRETCH_NAMES = ("U11", "U22", "U12")

Bounds = Sequence[Tuple[float, float]]


def _check_bounds(bounds: Bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
        raise ValueError(f"Bounds must be a non-empty list of (lo, hi) pairs: {bounds}")
    if np.any(b[:, 0] >= b[:, 1]):
        raise ValueError(f"Every bound needs lo < hi: {b.tolist()}")
    return b


def _corners(b: np.ndarray) -> np.ndarray:
    return np.array(list(itertools.product(*b.tolist())))


def sobol_sample(n: int, bounds: Bounds, include_corners: bool = False) -> np.ndarray:
    """Deterministic Sobol points scaled into ``bounds``, shape ``(n, d)``.

    The unscrambled sequence is used with its all-zero first point skipped.
    With ``include_corners`` the 2^d box corners come first.
    """
    if n < 1:
        raise ValueError(f"Number of samples must be >= 1, got {n}")
    b = _check_bounds(bounds)
    d = b.shape[0]
    if d > MAX_SOBOL_DIMENSION:
        raise ValueError(
            f"Sobol sampling supports at most {MAX_SOBOL_DIMENSION} dimensions, got {d}"
        )
    corners = np.empty((0, d))
    if include_corners:
        corners = _corners(b)
        if n < corners.shape[0]:
            raise ValueError(
                f"{n} samples cannot hold the {corners.shape[0]} box corners"
            )
    m = n - corners.shape[0]
    points = np.empty((0, d))
    if m:
        engine = qmc.Sobol(d, scramble=False)
        engine.fast_forward(1)
        with warnings.catch_warnings():
            # balance properties need powers of two; prefixes are intended here
            warnings.simplefilter("ignore", UserWarning)
            unit = engine.random(m)
        points = qmc.scale(unit, b[:, 0], b[:, 1])
    return np.vstack([corners, points])


def uniform_sample(n: int, bounds: Bounds, seed: int) -> np.ndarray:
    """Seeded uniform draws inside ``bounds``, shape ``(n, d)``."""
    if n < 1:
        raise ValueError(f"Number of samples must be >= 1, got {n}")
    b = _check_bounds(bounds)
    rng = np.random.default_rng(seed)
    return rng.uniform(b[:, 0], b[:, 1], size=(n, b.shape[0]))


@dataclass(frozen=True)
class ParameterPoint:
    stretch: Tuple[float, float, float]
    material: Tuple[float, ...] = ()

    def __post_init__(self):
        u = self.u_bar
        if not (u[0, 0] > 0 and np.linalg.det(u) > 0):
            raise ValueError(f"Stretch {self.stretch} is not positive definite")

    @property
    def u_bar(self) -> np.ndarray:
        u11, u22, u12 = self.stretch
        return np.array([[u11, u12], [u12, u22]])

    def as_vector(self) -> np.ndarray:
        return np.array(tuple(self.stretch) + tuple(self.material))

    @classmethod
    def from_vector(cls, x: Sequence[float]) -> "ParameterPoint":
        x = [float(v) for v in x]
        return cls(stretch=tuple(x[:3]), material=tuple(x[3:]))


@dataclass(frozen=True)
class MaterialSlot:
    """One sampled material component; ``fields`` of ``phase`` share its value."""

    phase: int
    fields: Tuple[str, ...]
    bounds: Tuple[float, float]

    @property
    def name(self) -> str:
        return f"{'='.join(self.fields)}[{self.phase}]"


@dataclass(frozen=True)
class MaterialLayout:
    base: Dict[int, MaterialParams]
    slots: Tuple[MaterialSlot, ...] = ()

    def __post_init__(self):
        for slot in self.slots:
            if slot.phase not in self.base:
                raise ConfigError(f"Sampled slot {slot.name} refers to unknown phase")
            if set(slot.fields) - {"c1", "d1"}:
                raise ConfigError(f"Unknown material field in slot {slot.name}")

    def materials(self, values: Sequence[float] = ()) -> Dict[int, MaterialParams]:
        """Material of every phase with the sampled ``values`` applied."""
        if len(values) != len(self.slots):
            raise ValueError(
                f"Expected {len(self.slots)} material values, got {len(values)}"
            )
        params = {p: {"c1": m.c1, "d1": m.d1} for p, m in self.base.items()}
        for slot, value in zip(self.slots, values):
            for name in slot.fields:
                params[slot.phase][name] = float(value)
        return {p: MaterialParams(**v) for p, v in params.items()}


@dataclass(frozen=True)
class ParameterSpace:
    stretch_bounds: Tuple[Tuple[float, float], ...]
    material: MaterialLayout = field(
        default_factory=lambda: MaterialLayout({0: MaterialParams(1.0, 1.0)})
    )

    @property
    def dimension(self) -> int:
        return 3 + len(self.material.slots)

    @property
    def names(self) -> List[str]:
        return list(STRETCH_NAMES) + [s.name for s in self.material.slots]

    def sampling_bounds(self) -> np.ndarray:
        """Bounds in sampling coordinates (U - I, mu)."""
        rows = list(self.stretch_bounds) + [s.bounds for s in self.material.slots]
        return _check_bounds(rows)

    def box(self) -> Tuple[np.ndarray, np.ndarray]:
        """Bounds in parameter-vector coordinates (U, mu)."""
        b = self.sampling_bounds().copy()
        b[:2] += 1.0
        return b[:, 0], b[:, 1]

    def to_points(self, samples: np.ndarray) -> List[ParameterPoint]:
        x = np.array(samples, dtype=float)
        x[:, :2] += 1.0
        return [ParameterPoint.from_vector(row) for row in x]

    def sobol(self, n: int, include_corners: bool = False) -> List[ParameterPoint]:
        return self.to_points(sobol_sample(n, self.sampling_bounds(), include_corners))

    def uniform(self, n: int, seed: int) -> List[ParameterPoint]:
        return self.to_points(uniform_sample(n, self.sampling_bounds(), seed))
