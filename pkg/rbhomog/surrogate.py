"""The learned constitutive model: a POD stress basis plus one GP per coefficient.

Parameter vectors are ``(U11, U22, U12, mu...)``. Effective quantities only
need the volume averages of the basis functions, which are computed once.
"""

import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import h5py
import numpy as np

from .exceptions import ExtrapolationWarning, FormatError, MeshMismatchError
from .gpr import GprModel, GprOptions, fit
from .micro_fem import QuadratureStressField
from .pod import PodBasis, compute_basis, l2_norm, project_coefficients
from .sampling import STRETCH_NAMES
from .snapshots import SnapshotSet
from .tensor_mech import polar_stretch, polar_stretch_derivative

logger = logging.getLogger(__name__)

MODEL_FORMAT = "rbhomog-model"
MODEL_FORMAT_VERSION = 1
EXTRAPOLATION_MARGIN = 0.1


@dataclass(frozen=True)
class SurrogateResponse:
    stress: np.ndarray
    stiffness: np.ndarray
    material_sensitivity: np.ndarray
    extrapolated: bool


@dataclass(frozen=True)
class ErrorReport:
    """L2 errors of one predicted stress field and relative errors of its average."""

    total: float
    projection: float
    regression: float
    effective_stress: float
    effective_projection: float


def stretch_vector(u_bar: np.ndarray) -> np.ndarray:
    """(U11, U22, U12) of a symmetric stretch, batched over leading axes."""
    u = np.asarray(u_bar, dtype=float)
    if not np.allclose(u[..., 0, 1], u[..., 1, 0], rtol=1e-10, atol=1e-12):
        raise ValueError("Stretch tensor must be symmetric")
    shear = 0.5 * (u[..., 0, 1] + u[..., 1, 0])
    return np.stack([u[..., 0, 0], u[..., 1, 1], shear], -1)


def _expand_stretch_gradient(d: np.ndarray) -> np.ndarray:
    """Map derivatives w.r.t. (U11, U22, U12) onto a full 4th-order tangent."""
    a = np.zeros(d.shape[:-1] + (2, 2))
    a[..., 0, 0] = d[..., 0]
    a[..., 1, 1] = d[..., 1]
    a[..., 0, 1] = a[..., 1, 0] = 0.5 * d[..., 2]
    return a


class SurrogateModel:
    def __init__(
        self,
        basis: PodBasis,
        regressors: Sequence[GprModel],
        lo: np.ndarray,
        hi: np.ndarray,
        mesh_hash: bytes,
        names: Optional[List[str]] = None,
    ):
        if len(regressors) != basis.size:
            raise ValueError(
                f"{len(regressors)} regressors for a basis of size {basis.size}"
            )
        self.basis = basis
        self.regressors = list(regressors)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if any(r.kernel.dimension != self.dimension for r in self.regressors):
            raise ValueError("Regressor input dimension does not match the layout")
        self.mesh_hash = mesh_hash
        self.names = names or list(STRETCH_NAMES) + [
            f"mu{k}" for k in range(self.dimension - 3)
        ]
        self.averages = basis.averages()

    @property
    def size(self) -> int:
        return self.basis.size

    @property
    def dimension(self) -> int:
        return int(self.lo.shape[0])

    def truncated(self, n: int) -> "SurrogateModel":
        """The model restricted to its first ``n`` basis functions."""
        return SurrogateModel(
            self.basis.truncated(n), self.regressors[:n], self.lo, self.hi,
            self.mesh_hash, self.names,
        )

    # ---- parameters ------------------------------------------------------

    def parameters(self, u_bar: np.ndarray, mu: Sequence[float] = ()) -> np.ndarray:
        """Parameter vector(s) of a symmetric stretch and material values."""
        u = stretch_vector(u_bar)
        mu = np.asarray(mu, dtype=float)
        mu = np.broadcast_to(mu, u.shape[:-1] + mu.shape[-1:])
        x = np.concatenate([u, mu], axis=-1)
        if x.shape[-1] != self.dimension:
            raise ValueError(
                f"Model expects {self.dimension - 3} material values, "
                f"got {mu.shape[-1]}"
            )
        return x

    def is_extrapolating(self, x: np.ndarray, warn: bool = True) -> bool:
        """True when any point of ``x`` lies beyond the extrapolation margin.

        Warns with :class:`ExtrapolationWarning` unless ``warn`` is False.
        """
        margin = EXTRAPOLATION_MARGIN * (self.hi - self.lo)
        x = np.atleast_2d(x)
        outside = np.any((x < self.lo - margin) | (x > self.hi + margin))
        if outside and warn:
            warnings.warn(
                f"Surrogate queried more than {EXTRAPOLATION_MARGIN:.0%} outside its "
                f"training box",
                ExtrapolationWarning,
                stacklevel=3,
            )
        return bool(outside)

    def coefficients(self, x: np.ndarray) -> np.ndarray:
        """Regressed coefficients, shape ``(..., L)``."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dimension)
        alpha = np.stack([r.predict_mean(flat) for r in self.regressors], axis=-1)
        return alpha.reshape(x.shape[:-1] + (self.size,))

    def coefficient_gradients(self, x: np.ndarray) -> np.ndarray:
        """d alpha_l / d x, shape ``(..., L, d)``."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dimension)
        grad = np.stack([r.predict_gradient(flat) for r in self.regressors], axis=-2)
        return grad.reshape(x.shape[:-1] + (self.size, self.dimension))

    def coefficient_variance(self, x: np.ndarray) -> np.ndarray:
        """Posterior variance of every coefficient (uncalibrated)."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dimension)
        var = np.stack([r.predict_variance(flat) for r in self.regressors], axis=-1)
        return var.reshape(x.shape[:-1] + (self.size,))

    # ---- responses -------------------------------------------------------

    def stress_field(
        self, u_bar: np.ndarray, mu: Sequence[float] = ()
    ) -> QuadratureStressField:
        x = self.parameters(u_bar, mu)
        extrapolated = self.is_extrapolating(x)
        stress = self.basis.reconstruct(self.coefficients(x))
        return QuadratureStressField(
            stress=stress, weights=self.basis.weights, extrapolated=extrapolated
        )

    def effective_stress(
        self, u_bar: np.ndarray, mu: Sequence[float] = ()
    ) -> np.ndarray:
        x = self.parameters(u_bar, mu)
        self.is_extrapolating(x)
        return np.einsum("...l,lij->...ij", self.coefficients(x), self.averages)

    def _stretch_derivative(self, x: np.ndarray) -> np.ndarray:
        """d P_bar / d x, shape (..., 2, 2, d)."""
        grad = self.coefficient_gradients(x)
        return np.einsum("lij,...lc->...ijc", self.averages, grad)

    def effective_stiffness(
        self, u_bar: np.ndarray, mu: Sequence[float] = ()
    ) -> np.ndarray:
        """d P_bar / d F_bar at a pure stretch, shape (..., 2, 2, 2, 2)."""
        x = self.parameters(u_bar, mu)
        self.is_extrapolating(x)
        return _expand_stretch_gradient(self._stretch_derivative(x)[..., :3])

    def evaluate(
        self, u_bar: np.ndarray, mu: Sequence[float] = ()
    ) -> SurrogateResponse:
        """Effective stress, stiffness and material sensitivity d P_bar / d mu."""
        x = self.parameters(u_bar, mu)
        extrapolated = self.is_extrapolating(x)
        d = self._stretch_derivative(x)
        stress = np.einsum("...l,lij->...ij", self.coefficients(x), self.averages)
        return SurrogateResponse(
            stress=stress,
            stiffness=_expand_stretch_gradient(d[..., :3]),
            material_sensitivity=d[..., 3:],
            extrapolated=extrapolated,
        )

    def constitutive_eval(self, f_bar: np.ndarray, mu: Sequence[float] = ()):
        """Stress and consistent tangent at a general deformation gradient.

        With F = R U the stress is R P_bar(U); the tangent differentiates
        through the polar decomposition. Batched over leading axes of f_bar.
        """
        f_bar = np.asarray(f_bar, dtype=float)
        rotation, stretch = polar_stretch(f_bar)
        d_rotation, d_stretch = polar_stretch_derivative(f_bar, rotation, stretch)
        x = self.parameters(stretch, mu)
        self.is_extrapolating(x)
        s = np.einsum("...l,lij->...ij", self.coefficients(x), self.averages)
        d = self._stretch_derivative(x)[..., :3]
        du = np.stack(
            [
                d_stretch[..., 0, 0, :, :],
                d_stretch[..., 1, 1, :, :],
                0.5 * (d_stretch[..., 0, 1, :, :] + d_stretch[..., 1, 0, :, :]),
            ],
            axis=-3,
        )
        stress = rotation @ s
        tangent = np.einsum("...imkl,...mj->...ijkl", d_rotation, s)
        tangent = tangent + np.einsum("...im,...mjc,...ckl->...ijkl", rotation, d, du)
        return stress, tangent


def train(
    snapshots: SnapshotSet,
    n_modes: Optional[int] = None,
    energy: Optional[float] = None,
    gpr_opts: Optional[GprOptions] = None,
    n_pod: Optional[int] = None,
    n_reg: Optional[int] = None,
    box: Optional[Sequence[np.ndarray]] = None,
    names: Optional[List[str]] = None,
    workers: int = 1,
) -> SurrogateModel:
    """Build the basis from the first ``n_pod`` snapshots and regress the
    coefficients of the first ``n_reg``."""
    start = time.perf_counter()
    n_pod = n_pod or snapshots.n
    n_reg = n_reg or snapshots.n
    if n_reg < 2:
        raise ValueError(f"At least 2 regression snapshots are required, got {n_reg}")
    basis = compute_basis(snapshots.prefix(n_pod), n_modes=n_modes, energy=energy)
    reg = snapshots.prefix(n_reg)
    alpha = project_coefficients(reg.stress, basis)

    def fit_one(index):
        return fit(reg.params, alpha[:, index], gpr_opts)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            regressors = list(pool.map(fit_one, range(basis.size)))
    else:
        regressors = [fit_one(k) for k in range(basis.size)]

    if box is None:
        lo, hi = reg.params.min(axis=0), reg.params.max(axis=0)
    else:
        lo, hi = box
    model = SurrogateModel(basis, regressors, lo, hi, snapshots.mesh_hash, names)
    logger.info(
        f"Trained surrogate with L = {basis.size}, N_pod = {n_pod}, N_reg = {n_reg} "
        f"in {time.perf_counter() - start:.2f} s"
    )
    return model


def error_decomposition(
    model: SurrogateModel,
    test_snapshot: Union[QuadratureStressField, np.ndarray],
    test_params: np.ndarray,
) -> ErrorReport:
    """Split the L2 error of the predicted field into projection and regression."""
    stress = (
        test_snapshot.stress
        if isinstance(test_snapshot, QuadratureStressField)
        else np.asarray(test_snapshot, dtype=float)
    )
    basis = model.basis
    alpha = project_coefficients(stress, basis)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        alpha_hat = model.coefficients(np.asarray(test_params, dtype=float))
    w = basis.weights
    projected = basis.reconstruct(alpha)
    predicted = basis.reconstruct(alpha_hat)

    p_true = np.einsum("q,qij->ij", w, stress) / w.sum()
    p_proj = np.einsum("l,lij->ij", alpha, model.averages)
    p_pred = np.einsum("l,lij->ij", alpha_hat, model.averages)
    scale = np.linalg.norm(p_true)
    scale = scale if scale > 0.0 else 1.0
    return ErrorReport(
        total=float(l2_norm(stress - predicted, w)),
        projection=float(l2_norm(stress - projected, w)),
        regression=float(np.linalg.norm(alpha - alpha_hat)),
        effective_stress=float(np.linalg.norm(p_true - p_pred) / scale),
        effective_projection=float(np.linalg.norm(p_true - p_proj) / scale),
    )


def evaluate_test_set(
    model: SurrogateModel, snapshots: SnapshotSet
) -> List[ErrorReport]:
    if snapshots.n_qp != model.basis.functions.shape[1]:
        raise ValueError("Test snapshots do not share the model's quadrature layout")
    return [
        error_decomposition(model, snapshots.stress[i], snapshots.params[i])
        for i in range(snapshots.n)
    ]


def save_model(model: SurrogateModel, path: Union[str, Path]):
    with h5py.File(path, "w") as hf:
        hf.attrs["format"] = MODEL_FORMAT
        hf.attrs["version"] = MODEL_FORMAT_VERSION
        hf.attrs["mesh_hash"] = model.mesh_hash.hex()
        hf.attrs["names"] = json.dumps(model.names)
        hf.create_dataset("basis/functions", data=model.basis.functions)
        hf.create_dataset("basis/eigenvalues", data=model.basis.eigenvalues)
        hf.create_dataset("basis/weights", data=model.basis.weights)
        hf.create_dataset("layout/lo", data=model.lo)
        hf.create_dataset("layout/hi", data=model.hi)
        for k, regressor in enumerate(model.regressors):
            for key, value in regressor.to_arrays().items():
                hf.create_dataset(f"regressors/{k}/{key}", data=value)
    logger.debug(f"Saved surrogate model to {path}")


def load_model(
    path: Union[str, Path], expected_mesh_hash: Optional[bytes] = None
) -> SurrogateModel:
    try:
        with h5py.File(path, "r") as hf:
            if hf.attrs.get("format") != MODEL_FORMAT:
                raise FormatError(f"{path} is not a surrogate model archive")
            version = int(hf.attrs["version"])
            if version != MODEL_FORMAT_VERSION:
                raise FormatError(
                    f"Unsupported model format version {version}, expected "
                    f"{MODEL_FORMAT_VERSION}"
                )
            mesh_hash = bytes.fromhex(hf.attrs["mesh_hash"])
            basis = PodBasis(
                functions=hf["basis/functions"][()],
                eigenvalues=hf["basis/eigenvalues"][()],
                weights=hf["basis/weights"][()],
            )
            group = hf["regressors"]
            regressors = [
                GprModel.from_arrays({k: v[()] for k, v in group[str(i)].items()})
                for i in range(len(group))
            ]
            model = SurrogateModel(
                basis, regressors, hf["layout/lo"][()], hf["layout/hi"][()],
                mesh_hash, json.loads(hf.attrs["names"]),
            )
    except (OSError, KeyError) as e:
        raise FormatError(f"Cannot read model archive {path}: {e}") from e
    if expected_mesh_hash is not None and mesh_hash != expected_mesh_hash:
        raise MeshMismatchError(
            f"Model {path} was trained on mesh {mesh_hash.hex()[:12]}, "
            f"expected {expected_mesh_hash.hex()[:12]}"
        )
    return model
