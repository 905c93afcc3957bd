"""Quadrilateral element shape functions and quadrature geometry."""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .exceptions import MeshError

logger = logging.getLogger(__name__)

_GAUSS = 1.0 / np.sqrt(3.0)
# 2x2 Gauss rule; used in full form for quad4 and reduced form for quad8
GAUSS_POINTS = np.array(
    [[-_GAUSS, -_GAUSS], [_GAUSS, -_GAUSS], [_GAUSS, _GAUSS], [-_GAUSS, _GAUSS]]
)
GAUSS_WEIGHTS = np.ones(4)

# reference coordinates: corners counter-clockwise, then mid-sides 01, 12, 23, 30
_QUAD8_NODES = np.array(
    [
        [-1.0, -1.0],
        [1.0, -1.0],
        [1.0, 1.0],
        [-1.0, 1.0],
        [0.0, -1.0],
        [1.0, 0.0],
        [0.0, 1.0],
        [-1.0, 0.0],
    ]
)

NODES_PER_ELEMENT = {"quad4": 4, "quad8": 8}


def shape_functions(element_type: str, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Shape function values and reference derivatives at points ``xi``.

    Returns ``N`` of shape ``(n_points, n_nodes)`` and ``dN`` of shape
    ``(n_points, n_nodes, 2)``.
    """
    xi = np.atleast_2d(xi)
    x, y = xi[:, 0:1], xi[:, 1:2]
    if element_type == "quad4":
        xn, yn = _QUAD8_NODES[:4, 0], _QUAD8_NODES[:4, 1]
        n = 0.25 * (1 + x * xn) * (1 + y * yn)
        dn_dx = 0.25 * xn * (1 + y * yn)
        dn_dy = 0.25 * yn * (1 + x * xn)
    elif element_type == "quad8":
        xn, yn = _QUAD8_NODES[:, 0], _QUAD8_NODES[:, 1]
        n = np.empty((xi.shape[0], 8))
        dn_dx = np.empty_like(n)
        dn_dy = np.empty_like(n)
        xc, yc = xn[:4], yn[:4]
        n[:, :4] = 0.25 * (1 + x * xc) * (1 + y * yc) * (x * xc + y * yc - 1)
        dn_dx[:, :4] = 0.25 * xc * (1 + y * yc) * (2 * x * xc + y * yc)
        dn_dy[:, :4] = 0.25 * yc * (1 + x * xc) * (x * xc + 2 * y * yc)
        # mid-sides on xi = 0 (nodes 4, 6) and eta = 0 (nodes 5, 7)
        for a in (4, 6):
            n[:, a] = 0.5 * (1 - x[:, 0] ** 2) * (1 + y[:, 0] * yn[a])
            dn_dx[:, a] = -x[:, 0] * (1 + y[:, 0] * yn[a])
            dn_dy[:, a] = 0.5 * (1 - x[:, 0] ** 2) * yn[a]
        for a in (5, 7):
            n[:, a] = 0.5 * (1 + x[:, 0] * xn[a]) * (1 - y[:, 0] ** 2)
            dn_dx[:, a] = 0.5 * xn[a] * (1 - y[:, 0] ** 2)
            dn_dy[:, a] = -y[:, 0] * (1 + x[:, 0] * xn[a])
    else:
        raise MeshError(f"Unsupported element type {element_type!r}")
    return n, np.stack([dn_dx, dn_dy], axis=-1)


@dataclass(frozen=True)
class QuadratureGeometry:
    """Reference-configuration quadrature data of a whole mesh.

    ``grad`` holds dN/dX with shape ``(n_elem, n_qp_per_elem, n_nodes, 2)``,
    ``weights`` the Gauss weight times det(J) with shape
    ``(n_elem, n_qp_per_elem)`` and ``points`` the physical coordinates.
    """

    grad: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    values: np.ndarray

    @property
    def n_points(self) -> int:
        return int(self.weights.size)


def quadrature_geometry(
    nodes: np.ndarray, elements: np.ndarray, element_type: str
) -> QuadratureGeometry:
    """Map the 2x2 rule onto every element and check Jacobian positivity."""
    n, dn = shape_functions(element_type, GAUSS_POINTS)
    coords = nodes[elements]  # (ne, nen, 2)
    # J_ij = dX_i / dxi_j
    jac = np.einsum("eai,qaj->eqij", coords, dn)
    det = np.linalg.det(jac)
    if np.any(det <= 0.0):
        bad = np.unique(np.nonzero(det <= 0.0)[0])
        raise MeshError(
            f"Non-positive element Jacobian in {bad.size} element(s), "
            f"first: {bad[:5].tolist()}"
        )
    inv = np.linalg.inv(jac)
    grad = np.einsum("qaj,eqji->eqai", dn, inv)
    weights = det * GAUSS_WEIGHTS[None, :]
    points = np.einsum("qa,eai->eqi", n, coords)
    return QuadratureGeometry(grad=grad, weights=weights, points=points, values=n)


class Assembler:
    """Vectorised residual/stiffness assembly for a displacement field.

    Dofs are node-major: dof ``2 * node + component``.
    """

    def __init__(
        self, elements: np.ndarray, n_nodes: int, geometry: QuadratureGeometry
    ):
        self.elements = elements
        self.grad = geometry.grad
        self.weights = geometry.weights
        self.n_dofs = 2 * n_nodes
        self.edofs = (2 * elements[:, :, None] + np.arange(2)).reshape(
            elements.shape[0], -1
        )
        n_edof = self.edofs.shape[1]
        self._rows = np.repeat(self.edofs, n_edof, axis=1).ravel()
        self._cols = np.tile(self.edofs, (1, n_edof)).ravel()

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """Displacement gradient at every quadrature point, (ne, nq, 2, 2)."""
        un = u.reshape(-1, 2)[self.elements]
        return np.einsum("eai,eqaj->eqij", un, self.grad)

    def residual(self, stress: np.ndarray) -> np.ndarray:
        """Internal force vector sum_q w_q P_ij dN_a/dX_j."""
        re = np.einsum("eq,eqij,eqaj->eai", self.weights, stress, self.grad)
        return np.bincount(
            self.edofs.ravel(), weights=re.ravel(), minlength=self.n_dofs
        )

    def stiffness(self, tangent: np.ndarray) -> csr_matrix:
        ke = np.einsum(
            "eq,eqaj,eqijkl,eqbl->eaibk",
            self.weights,
            self.grad,
            tangent,
            self.grad,
            optimize=True,
        )
        return coo_matrix(
            (ke.ravel(), (self._rows, self._cols)), shape=(self.n_dofs, self.n_dofs)
        ).tocsr()
