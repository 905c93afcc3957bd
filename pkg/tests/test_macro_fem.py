"""Tests for the macroscale solver and the two-scale comparison helpers."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rbhomog.exceptions import (
    DivergenceError,
    FormatError,
    MeshError,
    MeshMismatchError,
)
from rbhomog.macro_fem import (
    ConstitutiveProvider,
    MacroOptions,
    MacroProblem,
    NeoHookeanProvider,
    RveProvider,
    SurrogateProvider,
    compare_solutions,
    cooks_membrane,
    load_solution,
    relative_field_error,
    save_solution,
    solve_macro,
)
from rbhomog.mesh import MeshSpec, build_mesh
from rbhomog.micro_fem import RveSolver
from rbhomog.sampling import MaterialLayout, ParameterSpace
from rbhomog.snapshots import generate_snapshots
from rbhomog.surrogate import train
from rbhomog.tensor_mech import MaterialParams

STIFF = MaterialParams(100.0, 100.0)


@pytest.fixture(scope="module")
def rve_solver():
    """Homogeneous RVE: its effective response is the Neo-Hookean law itself."""
    mesh = build_mesh(MeshSpec("unit_square", element="quad4", divisions=2))
    return RveSolver(mesh, "linear", {0: STIFF})


@pytest.fixture(scope="module")
def stiff_model(rve_solver):
    space = ParameterSpace(((-0.004, 0.004),) * 3, MaterialLayout({0: STIFF}))
    points = space.sobol(30, include_corners=True)
    snapshots = generate_snapshots(points, rve_solver.mesh, "linear", space.material)
    return train(snapshots, n_modes=4)


@pytest.fixture(scope="module")
def reference_solution():
    problem = cooks_membrane(2, traction=0.1, steps=3)
    return solve_macro(problem, NeoHookeanProvider(STIFF))


class _FailingProvider(ConstitutiveProvider):
    def _evaluate(self, f_bar, point_ids, step):
        raise DivergenceError("micro solve failed")


def test_cooks_membrane_problem():
    problem = cooks_membrane(2)
    assert problem.mesh.n_elements == 8
    assert problem.dirichlet_dofs.size == 2 * 3
    assert problem.traction_edges.shape == (2, 2)
    assert cooks_membrane(10).mesh.n_elements == 200
    with pytest.raises(ValueError):
        cooks_membrane(0)


def test_external_force_sums_to_total_load():
    """The right edge is 16 long, so a traction of 0.1 gives a total of 1.6."""
    force = cooks_membrane(3, traction=0.1).external_force().reshape(-1, 2)
    assert force[:, 0].sum() == pytest.approx(0.0)
    assert force[:, 1].sum() == pytest.approx(1.6)


def test_problem_validation():
    problem = cooks_membrane(1)
    with pytest.raises(ValueError):
        MacroProblem(problem.mesh, [], [])
    with pytest.raises(ValueError):
        MacroProblem(problem.mesh, [0, 1], [0.0])
    with pytest.raises(ValueError):
        MacroProblem(problem.mesh, [0], [0.0], load_steps=0)
    quad8 = build_mesh(MeshSpec("cook", element="quad8", divisions=1))
    with pytest.raises(MeshError):
        MacroProblem(quad8, [0], [0.0])


def test_zero_load_converges_immediately():
    problem = cooks_membrane(2, traction=0.0, steps=1)
    solution = solve_macro(problem, NeoHookeanProvider(STIFF))
    assert solution.iterations == [1]
    assert_allclose(solution.displacements, 0.0)
    assert_allclose(solution.stress, 0.0, atol=1e-14)


def test_neo_hookean_membrane(reference_solution):
    solution = reference_solution
    assert solution.n_steps == 3
    assert len(solution.step_times) == 3
    assert all(its >= 2 for its in solution.iterations)
    assert solution.constitutive_calls == 32 * solution.assemblies
    # the loaded corner moves up, the clamped edge stays put
    mesh = cooks_membrane(2).mesh
    tip = int(np.argmax(mesh.nodes[:, 1] + mesh.nodes[:, 0]))
    final = solution.displacements[-1]
    assert final[tip, 1] > 0.0
    assert_allclose(final[mesh.node_sets["left"]], 0.0)
    assert np.all(np.diff(solution.displacements[:, tip, 1]) > 0.0)


def test_compare_with_itself(reference_solution):
    report = compare_solutions(reference_solution, reference_solution)
    assert_allclose(report.error, 0.0)
    assert_allclose(report.max_error, 0.0)
    assert report.micro == {}


def test_compare_rejects_mismatched_solutions(reference_solution):
    provider = NeoHookeanProvider(STIFF)
    other = solve_macro(cooks_membrane(1, traction=0.1, steps=3), provider)
    with pytest.raises(MeshMismatchError):
        compare_solutions(reference_solution, other)
    shorter = solve_macro(cooks_membrane(2, traction=0.1, steps=2), provider)
    with pytest.raises(ValueError):
        compare_solutions(reference_solution, shorter)


def test_relative_field_error():
    reference = np.array([[1.0, 2.0], [3.0, 0.0]])[:, :, None]
    test = np.array([[1.0, 1.0], [2.0, 0.0]])[:, :, None]
    error = relative_field_error(reference, test)
    assert_allclose(error[:, :, 0], [[0.0, 1.0], [0.5, 0.0]])


def test_surrogate_reproduces_neo_hookean(reference_solution, stiff_model):
    provider = SurrogateProvider(stiff_model)
    solution = solve_macro(cooks_membrane(2, traction=0.1, steps=3), provider)
    assert not provider.extrapolated
    report = compare_solutions(reference_solution, solution)
    assert report.max_error.max() < 1e-2
    assert_allclose(
        solution.displacements[-1], reference_solution.displacements[-1], rtol=1e-2,
        atol=1e-4,
    )


def test_micro_field_comparison(reference_solution, stiff_model, rve_solver):
    report = compare_solutions(
        reference_solution,
        reference_solution,
        micro_points={"A": 0, "B": 17},
        solver=rve_solver,
        model=stiff_model,
    )
    assert set(report.micro) == {"A", "B"}
    for fields in report.micro.values():
        assert fields["reference"].shape == fields["predicted"].shape
        deviation = np.abs(fields["predicted"] - fields["reference"]).max()
        assert deviation < 1e-2 * np.abs(fields["reference"]).max()


@pytest.mark.slow
def test_fe2_matches_homogeneous_law(reference_solution, rve_solver):
    """Nested solves on a homogeneous cell give the analytic macro solution."""
    provider = RveProvider(rve_solver, workers=2)
    solution = solve_macro(cooks_membrane(2, traction=0.1, steps=3), provider)
    assert_allclose(
        solution.displacements, reference_solution.displacements, rtol=1e-6, atol=1e-9
    )
    assert len(provider._states) == 32
    assert solution.constitutive_calls == 32 * solution.assemblies


def test_constitutive_failure_exhausts_cuts():
    provider = _FailingProvider()
    with pytest.raises(DivergenceError):
        solve_macro(
            cooks_membrane(1, traction=0.1, steps=1), provider, MacroOptions(max_cuts=2)
        )
    # one attempt plus two cuts, each failing on its first assembly
    assert provider.calls == 3 * 8


def test_solution_round_trip(tmp_path, reference_solution):
    path = tmp_path / "fe2.h5"
    save_solution(reference_solution, path)
    loaded = load_solution(path)
    assert loaded.mesh_hash == reference_solution.mesh_hash
    assert_allclose(loaded.stress, reference_solution.stress)
    assert loaded.iterations == reference_solution.iterations
    assert loaded.assemblies == reference_solution.assemblies
    report = compare_solutions(reference_solution, loaded)
    assert_allclose(report.error, 0.0)


def test_load_solution_rejects_other_files(tmp_path):
    path = tmp_path / "fe2.h5"
    path.write_bytes(b"\x00" * 64)
    with pytest.raises(FormatError):
        load_solution(path)
