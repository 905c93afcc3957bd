"""RVE finite-element solver.

The unknown is the microscopic fluctuation w with F = F_bar + grad(w). Linear
displacement boundary conditions remove the boundary dofs; periodic boundary
conditions tie every slave dof to its master and pin one corner. Both are
expressed through a sparse reduction matrix T with w = T w_red, so Newton
iterations always solve the reduced system T^T K T dw = -T^T r.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import spsolve

from .elements import Assembler
from .exceptions import ConfigError, DivergenceError, InvertedElementError
from .mesh import Mesh
from .tensor_mech import IDENTITY, MaterialParams, neo_hookean_response

logger = logging.getLogger(__name__)

BOUNDARY_CONDITIONS = ("linear", "periodic")


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-9
    atol: float = 1e-12
    max_iter: int = 25
    max_cuts: int = 8

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"Newton tolerance must be positive, got {self.tol}")
        if self.max_iter < 1 or self.max_cuts < 0:
            raise ValueError("max_iter must be >= 1 and max_cuts >= 0")


@dataclass(frozen=True)
class QuadratureStressField:
    """PK1 stress per quadrature point with its integration weight.

    Points are stored element-major (element, local Gauss point).
    """

    stress: np.ndarray
    weights: np.ndarray
    extrapolated: bool = False

    def __post_init__(self):
        if self.stress.shape != (self.weights.shape[0], 2, 2):
            raise ValueError(
                f"Stress of shape {self.stress.shape} does not match "
                f"{self.weights.shape[0]} weights"
            )
        if np.any(self.weights <= 0.0):
            raise ValueError("Quadrature weights must be positive")

    @property
    def n_points(self) -> int:
        return int(self.weights.shape[0])

    @property
    def total_volume(self) -> float:
        return float(self.weights.sum())


@dataclass
class MicroSolution:
    fluctuation: np.ndarray
    stress_field: QuadratureStressField
    converged: bool
    newton_iterations: int
    f_bar: np.ndarray
    deformation: np.ndarray
    residual_history: List[float] = field(default_factory=list)
    load_steps: int = 1


def average_stress(stress_field: QuadratureStressField) -> np.ndarray:
    """Volume average |Omega|^-1 sum_q w_q P_q."""
    w = stress_field.weights
    return np.einsum("q,qij->ij", w, stress_field.stress) / w.sum()


def deformation_field(
    mesh: Mesh, fluctuation: np.ndarray, f_bar: np.ndarray
) -> np.ndarray:
    """F = F_bar + grad(w) at every quadrature point, shape (n_qp, 2, 2)."""
    grad = mesh.geometry.grad
    f = np.einsum("eai,eqaj->eqij", fluctuation[mesh.elements], grad)
    return (f + np.asarray(f_bar, dtype=float)).reshape(-1, 2, 2)


def average_deformation(
    solution: MicroSolution, mesh: Mesh, u_bar: np.ndarray
) -> np.ndarray:
    """Volume average of the microscopic deformation gradient."""
    f = deformation_field(mesh, solution.fluctuation, u_bar)
    w = mesh.geometry.weights.ravel()
    return np.einsum("q,qij->ij", w, f) / w.sum()


class RveSolver:
    """Newton solver for one RVE mesh, boundary condition and material map.

    Only read-only precomputed data is stored, so one instance may serve
    concurrent solves.
    """

    def __init__(
        self,
        mesh: Mesh,
        bc: str,
        mu_per_phase: Mapping[int, MaterialParams],
        opts: Optional[NewtonOptions] = None,
    ):
        if bc not in BOUNDARY_CONDITIONS:
            raise ConfigError(
                f"Unknown boundary condition {bc!r}, expected one of "
                f"{BOUNDARY_CONDITIONS}"
            )
        if bc == "periodic" and mesh.periodic_pairs is None:
            raise ConfigError("Periodic boundary conditions need a periodic mesh")
        missing = set(np.unique(mesh.phase_ids).tolist()) - set(mu_per_phase)
        if missing:
            raise ConfigError(f"No material parameters for phase(s) {sorted(missing)}")

        self.mesh = mesh
        self.bc = bc
        self.opts = opts or NewtonOptions()
        geo = mesh.geometry
        self._weights = geo.weights
        nq = geo.weights.shape[1]
        c1 = np.array([mu_per_phase[p].c1 for p in mesh.phase_ids])[:, None]
        d1 = np.array([mu_per_phase[p].d1 for p in mesh.phase_ids])[:, None]
        self._c1 = np.broadcast_to(c1, (mesh.n_elements, nq))
        self._d1 = np.broadcast_to(d1, (mesh.n_elements, nq))

        self.assembler = Assembler(mesh.elements, mesh.n_nodes, geo)
        self.n_dofs = self.assembler.n_dofs
        self.reduction = self._reduction_matrix()

    def _reduction_matrix(self) -> csr_matrix:
        mesh = self.mesh
        rep = np.arange(mesh.n_nodes)
        if self.bc == "linear":
            fixed = np.zeros(mesh.n_nodes, dtype=bool)
            fixed[mesh.boundary_nodes] = True
        else:
            masters, slaves = mesh.periodic_pairs.T
            rep[slaves] = masters
            lo, _ = mesh.bounds
            corner = int(np.argmin(np.linalg.norm(mesh.nodes - lo, axis=1)))
            fixed = rep == rep[corner]
        independent = np.unique(rep[~fixed])
        column = np.full(mesh.n_nodes, -1)
        column[independent] = np.arange(independent.size)
        node_col = column[rep]
        nodes = np.nonzero(node_col >= 0)[0]
        rows = np.concatenate([2 * nodes, 2 * nodes + 1])
        cols = np.concatenate([2 * node_col[nodes], 2 * node_col[nodes] + 1])
        return coo_matrix(
            (np.ones(rows.size), (rows, cols)),
            shape=(self.n_dofs, 2 * independent.size),
        ).tocsr()

    def _deformation(self, f_bar: np.ndarray, w: np.ndarray) -> np.ndarray:
        return f_bar + self.assembler.gradient(w)

    def _newton(
        self, f_bar: np.ndarray, w: np.ndarray
    ) -> Tuple[np.ndarray, int, List[float], bool]:
        opts = self.opts
        t = self.reduction
        history: List[float] = []
        reference = None
        for iteration in range(opts.max_iter + 1):
            f = self._deformation(f_bar, w)
            stress, tangent = neo_hookean_response(f, self._c1, self._d1)
            r = t.T @ self.assembler.residual(stress)
            norm = float(np.linalg.norm(r))
            history.append(norm)
            if reference is None:
                reference = norm
            # absolute floor relative to the internal force magnitude
            scale = float(np.sum(self._weights * np.linalg.norm(stress, axis=(-2, -1))))
            logger.debug(f"Newton iteration {iteration}: |r| = {norm:.3e}")
            if norm <= max(opts.tol * reference, opts.atol * max(1.0, scale)):
                return w, iteration, history, True
            if not np.isfinite(norm) or iteration == opts.max_iter:
                break
            k = t.T @ self.assembler.stiffness(tangent) @ t
            dw = spsolve(k.tocsc(), -r)
            w = w + t @ dw
        return w, opts.max_iter, history, False

    def solve(
        self,
        f_bar: np.ndarray,
        start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ) -> MicroSolution:
        """Solve for the fluctuation under ``f_bar``.

        ``start`` is an optional converged state ``(F_bar_start, w_start)``;
        the load path runs linearly from it to ``f_bar`` and is bisected on
        divergence or element inversion.
        """
        f_bar = np.asarray(f_bar, dtype=float)
        if not np.linalg.det(f_bar) > 0:
            raise InvertedElementError(
                f"Macroscopic deformation gradient has det = {np.linalg.det(f_bar):.6g}"
            )
        if start is None:
            f_start, w = IDENTITY.copy(), np.zeros(self.n_dofs)
        else:
            f_start, w = np.asarray(start[0], dtype=float), start[1].ravel().copy()

        lam, step, cuts, iterations, n_steps = 0.0, 1.0, 0, 0, 0
        history: List[float] = []
        while lam < 1.0:
            target = min(1.0, lam + step)
            f_target = f_start + target * (f_bar - f_start)
            try:
                w_new, its, history, ok = self._newton(f_target, w)
            except InvertedElementError:
                its, ok = 0, False
            if ok:
                lam, w = target, w_new
                iterations += its
                n_steps += 1
                continue
            cuts += 1
            if cuts > self.opts.max_cuts:
                last = history[-1] if history else None
                raise DivergenceError(
                    f"RVE solve did not converge for F_bar={f_bar.tolist()} after "
                    f"{self.opts.max_cuts} load-step cuts (last |r| = {last})",
                    residual=last,
                )
            step /= 2.0
            logger.warning(
                f"RVE Newton failed at load factor {target:.4g}, cutting step to "
                f"{step:.4g}"
            )

        if self.bc == "periodic":
            w = self._zero_mean(w)
        f = self._deformation(f_bar, w)
        stress, _ = neo_hookean_response(f, self._c1, self._d1, tangent=False)
        stress_field = QuadratureStressField(
            stress=stress.reshape(-1, 2, 2), weights=self._weights.ravel().copy()
        )
        return MicroSolution(
            fluctuation=w.reshape(-1, 2),
            stress_field=stress_field,
            converged=True,
            newton_iterations=iterations,
            f_bar=f_bar.copy(),
            deformation=f.reshape(-1, 2, 2),
            residual_history=history,
            load_steps=n_steps,
        )

    def _zero_mean(self, w: np.ndarray) -> np.ndarray:
        wn = w.reshape(-1, 2)
        values = self.mesh.geometry.values
        w_qp = np.einsum("qa,eai->eqi", values, wn[self.mesh.elements])
        mean = np.einsum("eq,eqi->i", self._weights, w_qp) / self._weights.sum()
        return (wn - mean).ravel()

    def effective_stress(self, f_bar: np.ndarray, **kwargs) -> np.ndarray:
        return average_stress(self.solve(f_bar, **kwargs).stress_field)

    def perturbation_stiffness(
        self,
        f_bar: np.ndarray,
        h: Optional[float] = None,
        baseline: Optional[MicroSolution] = None,
    ) -> Tuple[np.ndarray, np.ndarray, MicroSolution]:
        """Central-difference effective tangent.

        Returns ``(P_bar, A_bar, baseline)``. Every perturbed solve is warm
        started from the baseline state.
        """
        f_bar = np.asarray(f_bar, dtype=float)
        if h is None:
            h = 1e-6 * max(1.0, float(np.linalg.norm(f_bar)))
        if not h > 0:
            raise ValueError(f"Perturbation step must be positive, got {h}")
        if baseline is None:
            baseline = self.solve(f_bar)
        start = (baseline.f_bar, baseline.fluctuation)
        stiffness = np.empty((2, 2, 2, 2))
        for k in range(2):
            for m in range(2):
                e = np.zeros((2, 2))
                e[k, m] = h
                try:
                    plus = self.effective_stress(f_bar + e, start=start)
                    minus = self.effective_stress(f_bar - e, start=start)
                except DivergenceError as err:
                    raise DivergenceError(
                        f"Perturbed RVE solve diverged for component ({k}, {m}): {err}",
                        residual=err.residual,
                    ) from err
                stiffness[:, :, k, m] = (plus - minus) / (2.0 * h)
        return average_stress(baseline.stress_field), stiffness, baseline


def solve_rve(
    mesh: Mesh,
    bc: str,
    u_bar: np.ndarray,
    mu_per_phase: Mapping[int, MaterialParams],
    opts: Optional[NewtonOptions] = None,
) -> MicroSolution:
    return RveSolver(mesh, bc, mu_per_phase, opts).solve(u_bar)


def perturbation_stiffness(
    mesh: Mesh,
    f_bar: np.ndarray,
    mu_per_phase: Mapping[int, MaterialParams],
    h: Optional[float] = None,
    bc: str = "linear",
    opts: Optional[NewtonOptions] = None,
) -> np.ndarray:
    """Finite-difference effective stiffness A[:, :, k, l] = dP_bar/dF_bar_kl."""
    _, stiffness, _ = RveSolver(mesh, bc, mu_per_phase, opts).perturbation_stiffness(
        f_bar, h
    )
    return stiffness
