"""Tests for the POD + GP surrogate model."""

import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rbhomog.exceptions import (
    ExtrapolationWarning,
    FitError,
    FormatError,
    MeshMismatchError,
)
from rbhomog.pod import l2_norm, project_coefficients
from rbhomog.snapshots import SnapshotSet
from rbhomog.surrogate import (
    error_decomposition,
    evaluate_test_set,
    load_model,
    save_model,
    stretch_vector,
    train,
)
from rbhomog.tensor_mech import rotation_matrix

U_BAR = np.array([[1.02, 0.01], [0.01, 0.98]])


@pytest.fixture(scope="module")
def model(porous_snapshots):
    return train(porous_snapshots, n_modes=8)


@pytest.fixture(scope="module")
def material_model():
    """Synthetic four-parameter data set: fields depend smoothly on (U, mu)."""
    rng = np.random.default_rng(5)
    modes = rng.normal(size=(3, 16, 2, 2))
    params = np.column_stack(
        [
            rng.uniform(0.95, 1.05, 30),
            rng.uniform(0.95, 1.05, 30),
            rng.uniform(-0.05, 0.05, 30),
            rng.uniform(50.0, 150.0, 30),
        ]
    )
    u11, u22, u12, mu = params.T
    amplitude = np.column_stack(
        [mu / 100 * (u11 - 1), (u22 - 1) + 0.1 * u12**2, np.sin(mu / 50) * u12]
    )
    stress = np.einsum("nk,kqij->nqij", amplitude, modes)
    snapshots = SnapshotSet(stress, np.full(16, 1 / 16), params, bytes(32))
    return train(snapshots, n_modes=3)


def _fd_stretch(fun, u, h=1e-6):
    """Derivative of fun w.r.t. (U11, U22, U12) with the shear kept symmetric."""
    directions = [
        np.array([[1.0, 0.0], [0.0, 0.0]]),
        np.array([[0.0, 0.0], [0.0, 1.0]]),
        np.array([[0.0, 1.0], [1.0, 0.0]]),
    ]
    return [(fun(u + h * e) - fun(u - h * e)) / (2 * h) for e in directions]


def test_stretch_vector():
    assert_allclose(stretch_vector(U_BAR), [1.02, 0.98, 0.01])
    with pytest.raises(ValueError):
        stretch_vector(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_coefficients_interpolate_training_data(model, porous_snapshots):
    alpha = project_coefficients(porous_snapshots.stress, model.basis)
    alpha_hat = model.coefficients(porous_snapshots.params)
    residual = np.abs(alpha_hat - alpha).max(axis=0)
    assert np.all(residual <= 1e-8 * np.maximum(1.0, np.abs(alpha).max(axis=0)))


def test_identity_gives_zero_stress(model, porous_snapshots):
    assert_allclose(porous_snapshots.params[0], [1.0, 1.0, 0.0])
    weights = porous_snapshots.weights
    scale = l2_norm(porous_snapshots.stress, weights).max()
    field = model.stress_field(np.eye(2))
    assert l2_norm(field.stress, weights) < 1e-8 * scale


def test_effective_stress_is_average_of_field(model):
    field = model.stress_field(U_BAR)
    average = np.einsum("q,qij->ij", field.weights, field.stress) / field.total_volume
    assert_allclose(model.effective_stress(U_BAR), average, atol=1e-12)


def test_batched_effective_stress(model):
    stack = np.stack([U_BAR, np.eye(2), U_BAR.T])
    batched = model.effective_stress(stack)
    assert batched.shape == (3, 2, 2)
    assert_allclose(batched[0], model.effective_stress(U_BAR))


def _random_stretches(n, seed):
    """Symmetric stretches drawn uniformly from the porous training box."""
    rng = np.random.default_rng(seed)
    u11, u22, u12 = rng.uniform(-0.05, 0.05, size=(3, n))
    return np.stack([[1.0 + u11, u12], [u12, 1.0 + u22]]).transpose(2, 0, 1)


def test_effective_stiffness_matches_finite_differences(model):
    tol = dict(rtol=1e-5, atol=1e-8)
    for u_bar in _random_stretches(50, seed=11):
        stiffness = model.effective_stiffness(u_bar)
        d11, d22, d12 = _fd_stretch(model.effective_stress, u_bar)
        assert_allclose(stiffness[:, :, 0, 0], d11, **tol)
        assert_allclose(stiffness[:, :, 1, 1], d22, **tol)
        assert_allclose(stiffness[:, :, 0, 1] + stiffness[:, :, 1, 0], d12, **tol)


def test_constitutive_eval_rotates_stress(model):
    angles = np.random.default_rng(12).uniform(-np.pi, np.pi, 50)
    for angle, u_bar in zip(angles, _random_stretches(50, seed=13)):
        q = rotation_matrix(angle)
        stress, _ = model.constitutive_eval(q @ u_bar)
        assert_allclose(stress, q @ model.effective_stress(u_bar), atol=1e-10)


def test_constitutive_eval_tangent_matches_finite_differences(model):
    f = rotation_matrix(-0.2) @ U_BAR
    _, tangent = model.constitutive_eval(f)
    h = 1e-6
    numeric = np.empty((2, 2, 2, 2))
    for k in range(2):
        for m in range(2):
            e = np.zeros((2, 2))
            e[k, m] = h
            plus, _ = model.constitutive_eval(f + e)
            minus, _ = model.constitutive_eval(f - e)
            numeric[:, :, k, m] = (plus - minus) / (2 * h)
    assert_allclose(tangent, numeric, rtol=1e-4, atol=1e-4 * np.abs(tangent).max())


def test_extrapolation_warning(model):
    far = np.diag([1.5, 1.0])
    with pytest.warns(ExtrapolationWarning):
        response = model.evaluate(far)
    assert response.extrapolated
    with warnings.catch_warnings():
        warnings.simplefilter("error", ExtrapolationWarning)
        assert not model.evaluate(U_BAR).extrapolated


def test_extrapolation_flag_without_warning(model):
    far = np.diag([1.5, 1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("error", ExtrapolationWarning)
        assert model.is_extrapolating(model.parameters(far), warn=False)
        assert not model.is_extrapolating(model.parameters(U_BAR), warn=False)
        assert not model.stress_field(U_BAR).extrapolated
    with pytest.warns(ExtrapolationWarning):
        assert model.stress_field(far).extrapolated


def test_material_sensitivity(material_model):
    mu = [90.0]
    response = material_model.evaluate(U_BAR, mu)
    assert response.stress.shape == (2, 2)
    assert response.stiffness.shape == (2, 2, 2, 2)
    assert response.material_sensitivity.shape == (2, 2, 1)
    h = 1e-3
    numeric = (
        material_model.effective_stress(U_BAR, [mu[0] + h])
        - material_model.effective_stress(U_BAR, [mu[0] - h])
    ) / (2 * h)
    sensitivity = response.material_sensitivity[..., 0]
    assert_allclose(sensitivity, numeric, rtol=1e-4, atol=1e-9)


def test_parameter_count_checked(material_model, model):
    with pytest.raises(ValueError):
        material_model.effective_stress(U_BAR)
    with pytest.raises(ValueError):
        model.effective_stress(U_BAR, [1.0])


def test_error_decomposition_is_orthogonal(model, porous_test_snapshots):
    """total^2 = projection^2 + regression^2 for an orthonormal basis."""
    for i in range(porous_test_snapshots.n):
        report = error_decomposition(
            model, porous_test_snapshots.stress[i], porous_test_snapshots.params[i]
        )
        assert report.total**2 == pytest.approx(
            report.projection**2 + report.regression**2, rel=1e-8, abs=1e-20
        )


def test_regression_error_equals_field_norm(model, porous_test_snapshots):
    """The coefficient error norm is the L2 norm of the field it expands to."""
    basis = model.basis
    for i in range(porous_test_snapshots.n):
        stress = porous_test_snapshots.stress[i]
        params = porous_test_snapshots.params[i]
        report = error_decomposition(model, stress, params)
        alpha = project_coefficients(stress, basis)
        field = basis.reconstruct(alpha - model.coefficients(params))
        brute = l2_norm(field, basis.weights)
        assert report.regression == pytest.approx(brute, rel=1e-10, abs=1e-14)
        assert report.total <= report.projection + report.regression + 1e-12


def test_test_set_errors_are_small(model, porous_test_snapshots):
    reports = evaluate_test_set(model, porous_test_snapshots)
    assert len(reports) == porous_test_snapshots.n
    assert max(r.effective_stress for r in reports) < 1e-2
    assert all(r.effective_projection <= 1e-2 for r in reports)


def test_training_snapshot_has_no_regression_error(model, porous_snapshots):
    report = error_decomposition(
        model, porous_snapshots.field(5), porous_snapshots.params[5]
    )
    alpha = project_coefficients(porous_snapshots.stress, model.basis)
    bound = 1e-8 * np.sqrt(model.size) * max(1.0, np.abs(alpha).max())
    assert report.regression <= bound


def test_prefix_training(porous_snapshots):
    model = train(porous_snapshots, n_modes=4, n_pod=10, n_reg=16)
    assert model.size == 4
    assert all(r.n_train == 16 for r in model.regressors)
    assert model.truncated(2).size == 2
    with pytest.raises(ValueError):
        train(porous_snapshots, n_modes=2, n_reg=1)


def test_duplicate_training_points(porous_snapshots):
    stress = np.concatenate([porous_snapshots.stress, porous_snapshots.stress[3:4]])
    params = np.concatenate([porous_snapshots.params, porous_snapshots.params[3:4]])
    with pytest.raises(ValueError):
        SnapshotSet(stress, porous_snapshots.weights, params, bytes(32))
    params[-1, 0] += 1e-14
    nearly = SnapshotSet(stress, porous_snapshots.weights, params, bytes(32))
    with pytest.raises(FitError):
        train(nearly, n_modes=2)


def test_model_round_trip(tmp_path, model, porous_mesh):
    path = tmp_path / "model.h5"
    save_model(model, path)
    loaded = load_model(path, expected_mesh_hash=porous_mesh.digest)
    assert loaded.size == model.size
    assert loaded.names == model.names
    assert_allclose(loaded.effective_stress(U_BAR), model.effective_stress(U_BAR))
    assert_allclose(
        loaded.effective_stiffness(U_BAR), model.effective_stiffness(U_BAR)
    )


def test_model_mesh_mismatch(tmp_path, model, square_mesh):
    path = tmp_path / "model.h5"
    save_model(model, path)
    with pytest.raises(MeshMismatchError):
        load_model(path, expected_mesh_hash=square_mesh.digest)


def test_corrupted_model_archive(tmp_path, model):
    path = tmp_path / "model.h5"
    save_model(model, path)
    truncated = tmp_path / "truncated.h5"
    truncated.write_bytes(path.read_bytes()[:200])
    with pytest.raises(FormatError):
        load_model(truncated)
    garbage = tmp_path / "garbage.h5"
    garbage.write_text("not a model")
    with pytest.raises(FormatError):
        load_model(garbage)


def test_coefficient_variance(model, porous_snapshots):
    """Far below the prior variance at the training inputs."""
    at_data = model.coefficient_variance(porous_snapshots.params)
    assert at_data.shape == (porous_snapshots.n, model.size)
    assert model.coefficient_variance(U_BAR[[0, 1, 0], [0, 1, 1]]).shape == (8,)
    prior = np.array(
        [(r.kernel.sigma_f * r.target_scale) ** 2 for r in model.regressors]
    )
    assert np.all(at_data >= 0.0)
    assert np.all(at_data.max(axis=0) < 1e-3 * prior)
