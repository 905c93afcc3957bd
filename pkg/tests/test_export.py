"""Tests for VTK and table export."""

import meshio
import numpy as np
import pytest
from numpy.testing import assert_allclose

from rbhomog.export import (
    quadrature_subgrid,
    von_mises,
    write_quadrature_vtk,
    write_table,
)


def _shoelace(quads):
    x, y = quads[..., 0], quads[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, -1)


def test_subgrid_tiles_the_mesh(square_mesh):
    points, cells = quadrature_subgrid(square_mesh)
    assert cells.shape == (square_mesh.n_quadrature_points, 4)
    areas = _shoelace(points[cells])
    assert np.all(areas > 0.0)
    assert areas.sum() == pytest.approx(square_mesh.area())


def test_subgrid_follows_displacement(square_mesh):
    shift = np.tile([0.5, -0.25], (square_mesh.n_nodes, 1))
    moved, _ = quadrature_subgrid(square_mesh, shift)
    points, _ = quadrature_subgrid(square_mesh)
    assert_allclose(moved - points, np.tile([0.5, -0.25], (points.shape[0], 1)))


def test_von_mises():
    uniaxial = np.diag([2.0, 0.0])
    shear = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert von_mises(uniaxial) == pytest.approx(2.0)
    assert von_mises(shear) == pytest.approx(np.sqrt(3.0))
    assert von_mises(np.stack([uniaxial, shear])).shape == (2,)


def test_quadrature_vtk(tmp_path, fiber_mesh):
    n_qp = fiber_mesh.n_quadrature_points
    stress = np.zeros((n_qp, 2, 2))
    stress[:, 0, 1] = np.arange(n_qp)
    path = tmp_path / "field.vtk"
    write_quadrature_vtk(path, fiber_mesh, {"P": stress, "flag": np.ones(n_qp)})
    grid = meshio.read(path)
    assert len(grid.points) == 4 * n_qp
    data = {k: np.concatenate(v) for k, v in grid.cell_data.items()}
    assert_allclose(data["P_12"], np.arange(n_qp))
    assert_allclose(data["P_vm"], np.sqrt(3.0) * 0.5 * np.arange(n_qp))
    assert_allclose(data["phase"], fiber_mesh.quadrature_phases)
    assert_allclose(data["flag"], 1.0)


def test_quadrature_vtk_rejects_bad_fields(tmp_path, square_mesh):
    path = tmp_path / "field.vtk"
    with pytest.raises(ValueError):
        write_quadrature_vtk(path, square_mesh, {"P": np.zeros((3, 2, 2))})
    n_qp = square_mesh.n_quadrature_points
    with pytest.raises(ValueError):
        write_quadrature_vtk(path, square_mesh, {"P": np.zeros((n_qp, 3))})


def test_tables(tmp_path):
    columns = {"L": [1, 2], "mean_error": [0.5, 0.25]}
    write_table(tmp_path / "t.csv", columns)
    write_table(tmp_path / "t.dat", columns, gnuplot=True)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["L,mean_error", "1,0.5", "2,0.25"]
    dat = (tmp_path / "t.dat").read_text().splitlines()
    assert dat[0] == "# L mean_error"
    assert_allclose(np.loadtxt(tmp_path / "t.dat"), [[1, 0.5], [2, 0.25]])
