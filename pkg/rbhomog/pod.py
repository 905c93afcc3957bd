"""Proper orthogonal decomposition of quadrature stress fields.

The basis is built with the method of snapshots: the eigenpairs of the
L2 correlation matrix of the snapshots give B_l = lambda_l^-1/2 sum_i v_il P_i.
All inner products carry the quadrature weights.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import linalg

from .exceptions import DegenerateDataError
from .micro_fem import QuadratureStressField
from .snapshots import SnapshotSet

logger = logging.getLogger(__name__)

EIGENVALUE_CUTOFF = 1e-12


def _weighted(stress: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Multiply a (..., n_qp, 2, 2) array by the weights of its points."""
    return stress * weights[:, None, None]


def correlation_matrix(snapshots: SnapshotSet) -> np.ndarray:
    """C_ij = sum_q w_q P_q^(i) : P_q^(j)."""
    s = snapshots.flat()
    ws = _weighted(snapshots.stress, snapshots.weights).reshape(snapshots.n, -1)
    c = ws @ s.T
    return 0.5 * (c + c.T)


@dataclass(frozen=True)
class PodBasis:
    """L2-orthonormal stress basis ``functions[l]`` of shape (n_qp, 2, 2).

    ``eigenvalues`` holds the full non-increasing spectrum of the
    correlation matrix, not only the retained part.
    """

    functions: np.ndarray
    eigenvalues: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return int(self.functions.shape[0])

    @property
    def energy_captured(self) -> float:
        return float(self.eigenvalues[: self.size].sum() / self.eigenvalues.sum())

    def energy_table(self) -> np.ndarray:
        """Cumulative energy fraction for L = 1..N."""
        return np.cumsum(self.eigenvalues) / self.eigenvalues.sum()

    def truncated(self, n: int) -> "PodBasis":
        if not 1 <= n <= self.size:
            raise ValueError(f"Cannot truncate a basis of size {self.size} to {n}")
        return PodBasis(self.functions[:n], self.eigenvalues, self.weights)

    def averages(self) -> np.ndarray:
        """Volume averages |Omega|^-1 sum_q w_q B_l,q, shape (L, 2, 2)."""
        total = np.einsum("q,lqij->lij", self.weights, self.functions)
        return total / self.weights.sum()

    def gram(self) -> np.ndarray:
        b = self.functions.reshape(self.size, -1)
        wb = _weighted(self.functions, self.weights).reshape(self.size, -1)
        return wb @ b.T

    def reconstruct(self, coefficients: np.ndarray) -> np.ndarray:
        """sum_l alpha_l B_l for one coefficient vector or a stack of them."""
        return np.tensordot(coefficients, self.functions, axes=([-1], [0]))


def _check_layout(stress: np.ndarray, basis: PodBasis):
    if stress.shape[-3:] != basis.functions.shape[1:]:
        raise ValueError(
            f"Stress field layout {stress.shape[-3:]} does not match basis layout "
            f"{basis.functions.shape[1:]}"
        )


def project_coefficients(
    field: Union[QuadratureStressField, np.ndarray], basis: PodBasis
) -> np.ndarray:
    """alpha_l = (P, B_l) in L2; accepts a field or a stack of stress arrays."""
    stress = field.stress if isinstance(field, QuadratureStressField) else field
    stress = np.asarray(stress, dtype=float)
    _check_layout(stress, basis)
    return np.einsum("q,...qij,lqij->...l", basis.weights, stress, basis.functions)


def l2_norm(stress: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("q,...qij,...qij->...", weights, stress, stress))


def compute_basis(
    snapshots: SnapshotSet,
    n_modes: Optional[int] = None,
    energy: Optional[float] = None,
) -> PodBasis:
    """POD basis selected by mode count or by captured energy.

    ``n_modes`` takes precedence when both selectors are given. Modes below
    a relative eigenvalue cutoff are never retained.
    """
    if n_modes is None and energy is None:
        raise ValueError("Either a basis size or an energy fraction is required")
    if n_modes is not None and not 1 <= n_modes <= snapshots.n:
        raise ValueError(
            f"Basis size {n_modes} must lie in [1, {snapshots.n}] (number of snapshots)"
        )
    if energy is not None and not 0.0 < energy <= 1.0:
        raise ValueError(f"Energy fraction must lie in (0, 1], got {energy}")

    c = correlation_matrix(snapshots)
    lam, vec = linalg.eigh(c)
    order = np.argsort(-lam, kind="stable")
    lam, vec = np.maximum(lam[order], 0.0), vec[:, order]
    if not lam[0] > 0.0:
        raise DegenerateDataError("All snapshots are zero; no basis can be built")
    n_valid = int(np.sum(lam > EIGENVALUE_CUTOFF * lam[0]))

    if n_modes is not None:
        size = n_modes
        if size > n_valid:
            logger.warning(
                f"Requested {n_modes} basis functions but only {n_valid} eigenvalues "
                f"are above the cutoff; using {n_valid}"
            )
            size = n_valid
    else:
        ratio = np.cumsum(lam) / lam.sum()
        above = np.nonzero(ratio > energy)[0]
        size = int(above[0]) + 1 if above.size else n_valid
        size = min(size, n_valid)

    v = vec[:, :size]
    pivot = np.argmax(np.abs(v), axis=0)
    v = v * np.sign(v[pivot, np.arange(size)])

    s = snapshots.flat()
    b = (s.T @ v) / np.sqrt(lam[:size])
    # re-orthonormalise in the weighted inner product
    sqrt_w = np.repeat(np.sqrt(snapshots.weights), 4)[:, None]
    q, r = linalg.qr(b * sqrt_w, mode="economic")
    q = q * np.sign(np.diag(r))
    functions = (q / sqrt_w).T.reshape(size, snapshots.n_qp, 2, 2)

    basis = PodBasis(functions=functions, eigenvalues=lam, weights=snapshots.weights)
    logger.info(
        f"POD basis: L = {size} of {snapshots.n} snapshots, "
        f"energy {basis.energy_captured:.10f}"
    )
    return basis
