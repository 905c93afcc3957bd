"""Field and table export: VTK quadrature subgrids and CSV/gnuplot tables."""

import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import meshio
import numpy as np

from .elements import GAUSS_POINTS, shape_functions
from .mesh import Mesh

logger = logging.getLogger(__name__)

_COMPONENTS = ("11", "12", "21", "22")


def _subcell_corners() -> np.ndarray:
    """Reference corners of the sub-quad around each Gauss point, (4, 4, 2)."""
    cells = []
    for sx, sy in np.sign(GAUSS_POINTS):
        a, b = sorted((0.0, sx))
        c, d = sorted((0.0, sy))
        cells.append([[a, c], [b, c], [b, d], [a, d]])
    return np.array(cells)


def quadrature_subgrid(mesh: Mesh, displacement: Optional[np.ndarray] = None):
    """Split every element into one quad per quadrature point.

    Returns points of shape ``(n_qp * 4, 2)`` and quad connectivity of shape
    ``(n_qp, 4)`` ordered like the mesh's quadrature points.
    """
    coords = mesh.nodes if displacement is None else mesh.nodes + displacement
    corners = _subcell_corners().reshape(-1, 2)
    n, _ = shape_functions(mesh.element_type, corners)
    points = np.einsum("ca,eai->eci", n, coords[mesh.elements]).reshape(-1, 2)
    cells = np.arange(points.shape[0]).reshape(-1, 4)
    return points, cells


def von_mises(stress: np.ndarray) -> np.ndarray:
    """Plane von Mises equivalent of the symmetric part of ``stress``."""
    s11, s22 = stress[..., 0, 0], stress[..., 1, 1]
    s12 = 0.5 * (stress[..., 0, 1] + stress[..., 1, 0])
    return np.sqrt(np.maximum(s11**2 + s22**2 - s11 * s22 + 3.0 * s12**2, 0.0))


def write_quadrature_vtk(
    path: Union[str, Path],
    mesh: Mesh,
    fields: Mapping[str, np.ndarray],
    displacement: Optional[np.ndarray] = None,
):
    """Write quadrature-point fields as cell data (legacy ASCII VTK).

    Tensor fields ``(n_qp, 2, 2)`` are written componentwise plus a von
    Mises scalar ``<name>_vm``; ``(n_qp,)`` arrays are written as they are.
    """
    points, cells = quadrature_subgrid(mesh, displacement)
    n_qp = cells.shape[0]
    cell_data: Dict[str, list] = {"phase": [mesh.quadrature_phases.astype(float)]}
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if values.shape[0] != n_qp:
            raise ValueError(
                f"Field {name!r} has {values.shape[0]} points, mesh has {n_qp}"
            )
        if values.shape[1:] == (2, 2):
            flat = values.reshape(n_qp, 4)
            for k, comp in enumerate(_COMPONENTS):
                cell_data[f"{name}_{comp}"] = [flat[:, k]]
            cell_data[f"{name}_vm"] = [von_mises(values)]
        elif values.ndim == 1:
            cell_data[name] = [values]
        else:
            raise ValueError(f"Field {name!r} has unsupported shape {values.shape}")
    points3 = np.zeros((points.shape[0], 3))
    points3[:, :2] = points
    grid = meshio.Mesh(points3, [meshio.CellBlock("quad", cells)], cell_data=cell_data)
    grid.write(str(path), file_format="vtk", binary=False)
    logger.debug(f"Wrote {len(fields)} quadrature field(s) to {path}")


def write_table(
    path: Union[str, Path],
    columns: Mapping[str, Sequence[float]],
    gnuplot: bool = False,
):
    """Write equal-length columns as CSV, or whitespace separated for gnuplot."""
    names = list(columns)
    table = np.column_stack([np.asarray(columns[k], dtype=float) for k in names])
    if gnuplot:
        np.savetxt(path, table, header=" ".join(names), fmt="%.12g")
    else:
        np.savetxt(
            path, table, delimiter=",", header=",".join(names), comments="", fmt="%.12g"
        )
