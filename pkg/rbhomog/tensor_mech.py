"""Plane-strain Neo-Hookean material law and 2x2 tensor helpers.

Every 2D tensor here is the in-plane block of a 3D tensor with F33 = 1 and
zero out-of-plane shear, so the strain energy carries the 3D trace of the
right Cauchy-Green tensor (Tr C = Tr(F^T F) + 1).

Functions accept a single 2x2 tensor or a stack of shape ``(..., 2, 2)``;
the FE solvers call them on all quadrature points at once.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .exceptions import InvertedElementError

logger = logging.getLogger(__name__)

IDENTITY = np.eye(2)
# d F_ij / d F_kl
_DELTA_IK_JL = np.einsum("ik,jl->ijkl", IDENTITY, IDENTITY)
_SKEW = np.array([[0.0, -1.0], [1.0, 0.0]])

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class MaterialParams:
    """Neo-Hookean constants ``mu = [C1, D1]``."""

    c1: float
    d1: float

    def __post_init__(self):
        if not (self.c1 > 0 and self.d1 > 0):
            raise ValueError(
                f"Neo-Hookean constants must be positive, got c1={self.c1}, "
                f"d1={self.d1}"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.c1, self.d1])


def _jacobian(f: np.ndarray) -> np.ndarray:
    """Return det(f), raising if any determinant is not strictly positive."""
    jac = np.linalg.det(f)
    bad = ~(jac > 0.0)
    if np.any(bad):
        raise InvertedElementError(
            f"Deformation gradient with non-positive determinant "
            f"(min det = {np.min(jac):.6g}, {int(np.sum(bad))} point(s))"
        )
    return jac


def _inverse_transpose(f: np.ndarray) -> np.ndarray:
    return np.swapaxes(np.linalg.inv(f), -1, -2)


def neo_hookean_response(
    f: np.ndarray, c1: ArrayLike, d1: ArrayLike, tangent: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """Batched PK1 stress and material tangent.

    ``c1`` and ``d1`` broadcast against the leading dimensions of ``f``.
    Returns ``(P, A)`` with shapes ``(..., 2, 2)`` and ``(..., 2, 2, 2, 2)``;
    ``A`` is ``None`` when ``tangent`` is False.
    """
    f = np.asarray(f, dtype=float)
    jac = _jacobian(f)
    g = _inverse_transpose(f)
    c1 = np.asarray(c1, dtype=float)
    d1 = np.asarray(d1, dtype=float)

    vol = 2.0 * d1 * jac * (jac - 1.0)
    stress = 2.0 * c1[..., None, None] * (f - g) + vol[..., None, None] * g
    if not tangent:
        return stress, None

    # d(F^-T)_ij / dF_kl = -G_il G_kj
    g_il_kj = np.einsum("...il,...kj->...ijkl", g, g)
    g_ij_kl = np.einsum("...ij,...kl->...ijkl", g, g)
    a_dev = 2.0 * c1[..., None, None, None, None] * (_DELTA_IK_JL + g_il_kj)
    a_vol = (2.0 * d1 * (2.0 * jac**2 - jac))[..., None, None, None, None] * g_ij_kl
    a_vol = a_vol - vol[..., None, None, None, None] * g_il_kj
    return stress, a_dev + a_vol


def strain_energy(f: np.ndarray, mu: MaterialParams) -> ArrayLike:
    """W = C1 (Tr C - 3 - 2 ln J) + D1 (J - 1)^2."""
    f = np.asarray(f, dtype=float)
    jac = _jacobian(f)
    trace_c = np.sum(f * f, axis=(-2, -1)) + 1.0
    energy = mu.c1 * (trace_c - 3.0 - 2.0 * np.log(jac)) + mu.d1 * (jac - 1.0) ** 2
    return float(energy) if np.ndim(energy) == 0 else energy


def pk1_stress(f: np.ndarray, mu: MaterialParams) -> np.ndarray:
    """First Piola-Kirchhoff stress P = dW/dF."""
    stress, _ = neo_hookean_response(f, mu.c1, mu.d1, tangent=False)
    return stress


def material_tangent(f: np.ndarray, mu: MaterialParams) -> np.ndarray:
    """Closed-form material tangent A = dP/dF, indexed ``A[i, j, k, l]``."""
    _, tangent = neo_hookean_response(f, mu.c1, mu.d1)
    return tangent


def polar_stretch(f: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Polar decomposition f = R U via the eigen-decomposition of f^T f."""
    f = np.asarray(f, dtype=float)
    _jacobian(f)
    c = np.swapaxes(f, -1, -2) @ f
    lam, vec = np.linalg.eigh(c)
    stretch = np.einsum("...ik,...k,...jk->...ij", vec, np.sqrt(lam), vec)
    stretch = 0.5 * (stretch + np.swapaxes(stretch, -1, -2))
    rotation = f @ np.linalg.inv(stretch)
    return rotation, stretch


def polar_stretch_derivative(
    f: np.ndarray, rotation: np.ndarray, stretch: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Derivatives dR/dF and dU/dF of the 2D polar decomposition.

    In 2D the rotation angle is ``atan2(F21 - F12, F11 + F22)``, which gives
    dR = R S dphi and dU = -S U dphi + R^T dF with S the unit skew tensor.
    Both results are indexed ``[i, j, k, l]`` = d(.)_ij / dF_kl.
    """
    f = np.asarray(f, dtype=float)
    s = f[..., 1, 0] - f[..., 0, 1]
    t = f[..., 0, 0] + f[..., 1, 1]
    rho2 = s * s + t * t
    dphi = np.stack(
        [np.stack([-s, -t], axis=-1), np.stack([t, -s], axis=-1)], axis=-2
    ) / rho2[..., None, None]

    d_rotation = np.einsum("...ij,...kl->...ijkl", rotation @ _SKEW, dphi)
    d_stretch = -np.einsum("...ij,...kl->...ijkl", _SKEW @ stretch, dphi)
    d_stretch = d_stretch + np.einsum("...ki,jl->...ijkl", rotation, IDENTITY)
    return d_rotation, d_stretch


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def elastic_constants(mu: MaterialParams) -> Tuple[float, float]:
    """Young's modulus and Poisson ratio of the Neo-Hookean constants."""
    total = mu.c1 + mu.d1
    if not total > 0:
        raise ValueError(f"c1 + d1 must be positive, got {total}")
    youngs = 2.0 * mu.c1 * (3.0 * mu.d1 + 2.0 * mu.c1) / total
    poisson = mu.d1 / (2.0 * total)
    return youngs, poisson
