"""Tests for the RVE fluctuation solver."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rbhomog.exceptions import ConfigError, DivergenceError, InvertedElementError
from rbhomog.mesh import MeshSpec, build_mesh
from rbhomog.micro_fem import (
    NewtonOptions,
    QuadratureStressField,
    RveSolver,
    average_deformation,
    average_stress,
    perturbation_stiffness,
    solve_rve,
)
from rbhomog.tensor_mech import (
    MaterialParams,
    material_tangent,
    pk1_stress,
    rotation_matrix,
)

MATRIX = MaterialParams(1.0, 1.0)

U_BAR = np.array([[1.04, 0.02], [0.02, 0.97]])


def test_average_stress_weights():
    """Weights (1, 2, 1) over stresses 1, 2, 3 average to 2."""
    stress = np.array([1.0, 2.0, 3.0])[:, None, None] * np.eye(2)
    field = QuadratureStressField(stress=stress, weights=np.array([1.0, 2.0, 1.0]))
    assert_allclose(average_stress(field), 2.0 * np.eye(2))


def test_stress_field_validation():
    with pytest.raises(ValueError):
        QuadratureStressField(stress=np.zeros((3, 2, 2)), weights=np.ones(2))
    with pytest.raises(ValueError):
        QuadratureStressField(stress=np.zeros((2, 2, 2)), weights=np.array([1, 0.0]))


@pytest.mark.parametrize("bc", ["linear", "periodic"])
def test_homogeneous_rve_reproduces_constitutive_law(bc, fiber_mesh, homogeneous):
    """A single-material cell has zero fluctuation and P_bar = P(U_bar)."""
    solution = solve_rve(fiber_mesh, bc, U_BAR, homogeneous)
    assert solution.converged
    assert_allclose(solution.fluctuation, 0.0, atol=1e-10)
    assert_allclose(
        average_stress(solution.stress_field), pk1_stress(U_BAR, MATRIX), atol=1e-10
    )


def test_identity_gives_zero_stress(porous_mesh, homogeneous):
    solution = solve_rve(porous_mesh, "linear", np.eye(2), homogeneous)
    assert solution.newton_iterations == 0
    assert_allclose(solution.stress_field.stress, 0.0, atol=1e-14)


@pytest.mark.parametrize("bc", ["linear", "periodic"])
def test_average_deformation_equals_prescribed(bc, fiber_mesh, two_phase):
    solution = solve_rve(fiber_mesh, bc, U_BAR, two_phase)
    assert_allclose(average_deformation(solution, fiber_mesh, U_BAR), U_BAR, atol=1e-9)


def test_periodic_fluctuation_is_periodic(fiber_mesh, two_phase):
    solution = solve_rve(fiber_mesh, "periodic", U_BAR, two_phase)
    masters, slaves = fiber_mesh.periodic_pairs.T
    assert_allclose(
        solution.fluctuation[slaves], solution.fluctuation[masters], atol=1e-12
    )
    assert np.abs(solution.fluctuation).max() > 1e-6


def test_linear_fluctuation_vanishes_on_boundary(porous_mesh, homogeneous):
    solution = solve_rve(porous_mesh, "linear", U_BAR, homogeneous)
    assert_allclose(solution.fluctuation[porous_mesh.boundary_nodes], 0.0)


def test_heterogeneous_stiffer_than_matrix(fiber_mesh, two_phase, homogeneous):
    """Stiff fibers raise the effective stress under uniaxial stretch."""
    u_bar = np.diag([1.05, 1.0])
    soft = solve_rve(fiber_mesh, "periodic", u_bar, homogeneous)
    stiff = solve_rve(fiber_mesh, "periodic", u_bar, two_phase)
    assert (
        average_stress(stiff.stress_field)[0, 0]
        > average_stress(soft.stress_field)[0, 0]
    )


def test_rotation_objectivity(fiber_mesh, two_phase):
    """P_bar(Q U) = Q P_bar(U)."""
    q = rotation_matrix(0.4)
    base = solve_rve(fiber_mesh, "linear", U_BAR, two_phase)
    expected = q @ average_stress(base.stress_field)
    rotated = solve_rve(fiber_mesh, "linear", q @ U_BAR, two_phase)
    assert_allclose(average_stress(rotated.stress_field), expected, atol=1e-8)


def test_perturbation_stiffness_homogeneous(square_mesh, homogeneous):
    stiffness = perturbation_stiffness(square_mesh, U_BAR, homogeneous)
    assert_allclose(stiffness, material_tangent(U_BAR, MATRIX), rtol=1e-4, atol=1e-4)


def test_perturbation_stiffness_major_symmetry(fiber_mesh, two_phase):
    solver = RveSolver(fiber_mesh, "periodic", two_phase)
    p_bar, stiffness, baseline = solver.perturbation_stiffness(U_BAR)
    assert baseline.converged
    assert_allclose(p_bar, average_stress(baseline.stress_field))
    assert_allclose(stiffness, np.transpose(stiffness, (2, 3, 0, 1)), atol=1e-3)


def test_perturbation_step_must_be_positive(square_mesh, homogeneous):
    with pytest.raises(ValueError):
        perturbation_stiffness(square_mesh, U_BAR, homogeneous, h=0.0)


def test_warm_start_reaches_same_state(fiber_mesh, two_phase):
    solver = RveSolver(fiber_mesh, "linear", two_phase)
    first = solver.solve(U_BAR)
    target = U_BAR + np.array([[0.01, 0.0], [0.0, -0.01]])
    cold = solver.solve(target)
    warm = solver.solve(target, start=(first.f_bar, first.fluctuation))
    assert_allclose(warm.fluctuation, cold.fluctuation, atol=1e-8)


def test_inverted_macro_deformation(square_mesh, homogeneous):
    with pytest.raises(InvertedElementError):
        solve_rve(square_mesh, "linear", np.diag([1.0, -0.5]), homogeneous)


def test_configuration_errors(porous_mesh, homogeneous):
    with pytest.raises(ConfigError):
        RveSolver(porous_mesh, "traction", homogeneous)
    with pytest.raises(ConfigError):
        RveSolver(porous_mesh, "linear", {1: MATRIX})
    with pytest.raises(ValueError):
        NewtonOptions(tol=0.0)


def test_periodic_needs_periodic_mesh(homogeneous):
    mesh = build_mesh(MeshSpec("unit_square", divisions=2, periodic=False))
    with pytest.raises(ConfigError):
        RveSolver(mesh, "periodic", homogeneous)


def test_divergence_without_cuts(fiber_mesh, two_phase):
    """One Newton step without bisection cannot resolve the stiff inclusion."""
    opts = NewtonOptions(max_iter=1, max_cuts=0)
    with pytest.raises(DivergenceError) as excinfo:
        solve_rve(fiber_mesh, "linear", np.diag([1.3, 0.8]), two_phase, opts)
    assert excinfo.value.residual is not None


@pytest.mark.parametrize("bc", ["linear", "periodic"])
@pytest.mark.parametrize("mesh_name", ["fiber_mesh", "fiber_mesh_quad8"])
def test_fluctuation_does_no_work(request, mesh_name, bc, two_phase):
    """<P : grad w> vanishes, so the averaged stress power equals P_bar : dF_bar."""
    mesh = request.getfixturevalue(mesh_name)
    u_bar = np.array([[1.12, 0.04], [0.04, 0.93]])
    solution = solve_rve(mesh, bc, u_bar, two_phase)
    assert solution.converged
    field = solution.stress_field
    grad_w = solution.deformation - u_bar
    work = np.einsum("q,qij,qij->", field.weights, field.stress, grad_w)
    work /= field.total_volume
    assert abs(work) <= 1e-8 * np.linalg.norm(average_stress(field))


def test_quad8_heterogeneous_solve(fiber_mesh_quad8, two_phase, homogeneous):
    solution = solve_rve(fiber_mesh_quad8, "linear", U_BAR, two_phase)
    assert solution.converged
    assert solution.stress_field.n_points == 4 * fiber_mesh_quad8.n_elements
    soft = solve_rve(fiber_mesh_quad8, "linear", U_BAR, homogeneous)
    stiff = average_stress(solution.stress_field)
    assert np.linalg.norm(stiff) > np.linalg.norm(average_stress(soft.stress_field))


def test_homogeneous_oracle_random_stretches(square_mesh, homogeneous):
    rng = np.random.default_rng(21)
    solver = RveSolver(square_mesh, "linear", homogeneous)
    for _ in range(20):
        u11, u22 = rng.uniform(0.8, 1.2, size=2)
        u12 = rng.uniform(-0.2, 0.2)
        u_bar = np.array([[u11, u12], [u12, u22]])
        expected = pk1_stress(u_bar, MATRIX)
        p_bar = solver.effective_stress(u_bar)
        assert_allclose(p_bar, expected, rtol=0, atol=1e-10 * np.linalg.norm(expected))


def test_perturbation_step_sweep(fiber_mesh, two_phase):
    """Stiffness from steps 1e-5, 1e-6 and 1e-7 agrees to 1e-3."""
    solver = RveSolver(fiber_mesh, "linear", two_phase)
    baseline = solver.solve(U_BAR)
    results = [
        solver.perturbation_stiffness(U_BAR, h=h, baseline=baseline)[1]
        for h in (1e-5, 1e-6, 1e-7)
    ]
    for i, a in enumerate(results):
        for b in results[i + 1 :]:
            assert np.linalg.norm(a - b) <= 1e-3 * np.linalg.norm(a)


def test_newton_converges_quadratically(fiber_mesh, two_phase):
    solution = solve_rve(
        fiber_mesh, "linear", np.array([[1.15, 0.05], [0.05, 0.9]]), two_phase
    )
    history = np.array(solution.residual_history) / solution.residual_history[0]
    assert len(history) >= 3
    # pairs above the round-off floor only
    pairs = [
        (a, b) for a, b in zip(history[-4:-1], history[-3:]) if a >= 1e-6
    ]
    assert pairs
    assert max(b / a**2 for a, b in pairs) < 1e3
