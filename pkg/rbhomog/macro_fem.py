"""Macroscale finite elements with a pluggable constitutive provider.

A provider maps macroscopic deformation gradients at quadrature points to
effective stress and tangent. Three are available: the analytic Neo-Hookean
law, nested RVE solves (FE2 with a perturbation tangent) and the trained
surrogate.
"""

import logging
import threading
import time
import warnings
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import h5py
import numpy as np
from scipy.sparse.linalg import spsolve

from .elements import Assembler
from .exceptions import (
    DivergenceError,
    ExtrapolationWarning,
    FormatError,
    InvertedElementError,
    MeshError,
    MeshMismatchError,
)
from .mesh import Mesh, MeshSpec, build_mesh
from .micro_fem import RveSolver
from .surrogate import SurrogateModel
from .tensor_mech import (
    IDENTITY,
    MaterialParams,
    neo_hookean_response,
    polar_stretch,
)

logger = logging.getLogger(__name__)

SOLUTION_FORMAT = "rbhomog-macro"
SOLUTION_FORMAT_VERSION = 1


class ConstitutiveProvider(ABC):
    """Effective material response at macroscopic quadrature points."""

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def evaluate(
        self, f_bar: np.ndarray, point_ids: np.ndarray, step: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(P, A)`` for a stack of deformation gradients."""
        with self._lock:
            self.calls += int(f_bar.shape[0])
        return self._evaluate(f_bar, point_ids, step)

    @abstractmethod
    def _evaluate(
        self, f_bar: np.ndarray, point_ids: np.ndarray, step: int
    ) -> Tuple[np.ndarray, np.ndarray]:
        pass


class NeoHookeanProvider(ConstitutiveProvider):
    def __init__(self, mu: MaterialParams):
        super().__init__()
        self.mu = mu

    def _evaluate(self, f_bar, point_ids, step):
        return neo_hookean_response(f_bar, self.mu.c1, self.mu.d1)


class SurrogateProvider(ConstitutiveProvider):
    def __init__(self, model: SurrogateModel, mu: Sequence[float] = ()):
        super().__init__()
        self.model = model
        self.mu = tuple(mu)
        self.extrapolated = False

    def _evaluate(self, f_bar, point_ids, step):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ExtrapolationWarning)
            stress, tangent = self.model.constitutive_eval(f_bar, self.mu)
        if caught and not self.extrapolated:
            self.extrapolated = True
            logger.warning(f"Surrogate extrapolates at macro step {step}")
        return stress, tangent


class RveProvider(ConstitutiveProvider):
    """Nested RVE solves with a central-difference tangent.

    With ``warm_start`` every point restarts from its last converged
    microscopic state.
    """

    def __init__(
        self,
        solver: RveSolver,
        workers: int = 1,
        warm_start: bool = True,
        h: Optional[float] = None,
    ):
        super().__init__()
        self.solver = solver
        self.workers = workers
        self.warm_start = warm_start
        self.h = h
        self._states: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def _one(self, f: np.ndarray, pid: int):
        start = self._states.get(pid) if self.warm_start else None
        baseline = self.solver.solve(f, start=start)
        stress, tangent, _ = self.solver.perturbation_stiffness(
            f, self.h, baseline=baseline
        )
        if self.warm_start:
            with self._lock:
                self._states[pid] = (baseline.f_bar, baseline.fluctuation)
        return stress, tangent

    def _evaluate(self, f_bar, point_ids, step):
        args = list(zip(f_bar, (int(p) for p in point_ids)))
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(lambda a: self._one(*a), args))
        else:
            results = [self._one(*a) for a in args]
        return (
            np.stack([r[0] for r in results]),
            np.stack([r[1] for r in results]),
        )


@dataclass
class MacroProblem:
    """Boundary value problem on a quad4 mesh.

    ``dirichlet_dofs`` (dof = 2 * node + component) carry the full-load
    values ``dirichlet_values``; ``traction_edges`` are node pairs loaded
    by the dead reference traction ``traction`` (force per length). Both
    are scaled by the load factor k / load_steps.
    """

    mesh: Mesh
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    traction_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    traction: np.ndarray = field(default_factory=lambda: np.zeros(2))
    load_steps: int = 1

    def __post_init__(self):
        self.dirichlet_dofs = np.asarray(self.dirichlet_dofs, dtype=np.int64)
        self.dirichlet_values = np.asarray(self.dirichlet_values, dtype=float)
        edges = np.asarray(self.traction_edges, dtype=np.int64)
        self.traction_edges = edges.reshape(-1, 2)
        self.traction = np.asarray(self.traction, dtype=float)
        if self.mesh.element_type != "quad4":
            raise MeshError("Macro problems use bilinear quad4 elements")
        if self.dirichlet_dofs.size == 0:
            raise ValueError("At least one Dirichlet dof is needed against rigid modes")
        if self.dirichlet_values.shape != self.dirichlet_dofs.shape:
            raise ValueError("One prescribed value per Dirichlet dof is required")
        if self.load_steps < 1:
            raise ValueError(f"load_steps must be >= 1, got {self.load_steps}")

    def external_force(self) -> np.ndarray:
        """Consistent nodal forces of the full traction load."""
        f = np.zeros(2 * self.mesh.n_nodes)
        if self.traction_edges.size:
            x = self.mesh.nodes[self.traction_edges]
            length = np.linalg.norm(x[:, 1] - x[:, 0], axis=1)
            share = 0.5 * length[:, None] * self.traction[None, :]
            for end in range(2):
                dofs = 2 * self.traction_edges[:, end, None] + np.arange(2)
                np.add.at(f, dofs, share)
        return f


@dataclass(frozen=True)
class MacroOptions:
    tol: float = 1e-8
    atol: float = 1e-12
    max_iter: int = 20
    max_cuts: int = 6


@dataclass
class MacroSolution:
    """Converged state at the end of every load step."""

    displacements: np.ndarray
    deformation: np.ndarray
    stress: np.ndarray
    iterations: List[int]
    step_times: List[float]
    constitutive_calls: int
    assemblies: int
    mesh_hash: bytes
    # digest of the run settings that produced the solution, "" when unknown
    settings: str = ""

    @property
    def n_steps(self) -> int:
        return int(self.displacements.shape[0])


def _newton(
    problem: MacroProblem,
    provider: ConstitutiveProvider,
    assembler: Assembler,
    u: np.ndarray,
    lam: float,
    step: int,
    opts: MacroOptions,
    counter: List[int],
):
    mesh = problem.mesh
    free = np.setdiff1d(np.arange(assembler.n_dofs), problem.dirichlet_dofs)
    u = u.copy()
    u[problem.dirichlet_dofs] = lam * problem.dirichlet_values
    f_ext = lam * problem.external_force()
    ids = np.arange(mesh.n_quadrature_points)
    nq = assembler.weights.shape[1]
    reference = None
    for iteration in range(1, opts.max_iter + 1):
        f = IDENTITY + assembler.gradient(u)
        stress, tangent = provider.evaluate(f.reshape(-1, 2, 2), ids, step)
        counter[0] += 1
        stress = stress.reshape(mesh.n_elements, nq, 2, 2)
        tangent = tangent.reshape(mesh.n_elements, nq, 2, 2, 2, 2)
        r = (assembler.residual(stress) - f_ext)[free]
        norm = float(np.linalg.norm(r))
        if reference is None:
            reference = max(norm, float(np.linalg.norm(f_ext[free])))
        logger.debug(f"Macro step {step} iteration {iteration}: |r| = {norm:.3e}")
        if norm <= max(opts.tol * reference, opts.atol):
            return u, iteration, f.reshape(-1, 2, 2), stress.reshape(-1, 2, 2), norm
        if not np.isfinite(norm):
            break
        k = assembler.stiffness(tangent)[free][:, free]
        u[free] += spsolve(k.tocsc(), -r)
    return None, opts.max_iter, None, None, norm


def solve_macro(
    problem: MacroProblem,
    provider: ConstitutiveProvider,
    opts: Optional[MacroOptions] = None,
) -> MacroSolution:
    """Incremental Newton over the load steps with step bisection."""
    opts = opts or MacroOptions()
    mesh = problem.mesh
    assembler = Assembler(mesh.elements, mesh.n_nodes, mesh.geometry)
    u = np.zeros(assembler.n_dofs)
    counter = [0]
    calls_before = provider.calls
    history = {"u": [], "f": [], "p": [], "iterations": [], "times": []}

    for step in range(1, problem.load_steps + 1):
        start = time.perf_counter()
        lam = (step - 1) / problem.load_steps
        target = step / problem.load_steps
        increment, cuts, iterations = target - lam, 0, 0
        residual = None
        while lam < target - 1e-15:
            trial = min(target, lam + increment)
            try:
                u_new, its, f, p, residual = _newton(
                    problem, provider, assembler, u, trial, step, opts, counter
                )
            except (DivergenceError, InvertedElementError) as e:
                logger.warning(f"Macro step {step}: constitutive failure ({e})")
                u_new, its = None, 0
            iterations += its
            if u_new is not None:
                u, lam = u_new, trial
                continue
            cuts += 1
            if cuts > opts.max_cuts:
                raise DivergenceError(
                    f"Macro step {step} did not converge after {opts.max_cuts} cuts "
                    f"(last |r| = {residual})",
                    residual=residual,
                )
            increment /= 2.0
            logger.warning(f"Macro step {step}: cutting increment to {increment:.4g}")
        history["u"].append(u.reshape(-1, 2).copy())
        history["f"].append(f)
        history["p"].append(p)
        history["iterations"].append(iterations)
        history["times"].append(time.perf_counter() - start)
        logger.info(
            f"Macro step {step}/{problem.load_steps} converged in {iterations} "
            f"iteration(s), {history['times'][-1]:.2f} s"
        )

    return MacroSolution(
        displacements=np.stack(history["u"]),
        deformation=np.stack(history["f"]),
        stress=np.stack(history["p"]),
        iterations=history["iterations"],
        step_times=history["times"],
        constitutive_calls=provider.calls - calls_before,
        assemblies=counter[0],
        mesh_hash=mesh.digest,
    )


def cooks_membrane(
    n_elem_per_side: int, traction: float = 0.1, steps: int = 5
) -> MacroProblem:
    """Tapered Cook membrane: left edge clamped, vertical dead load on the right."""
    if n_elem_per_side < 1:
        raise ValueError(f"Need at least one element per side, got {n_elem_per_side}")
    mesh = build_mesh(MeshSpec("cook", element="quad4", divisions=n_elem_per_side))
    left = mesh.node_sets["left"]
    right = mesh.node_sets["right"]
    right = right[np.argsort(mesh.nodes[right, 1])]
    return MacroProblem(
        mesh=mesh,
        dirichlet_dofs=(2 * left[:, None] + np.arange(2)).ravel(),
        dirichlet_values=np.zeros(2 * left.size),
        traction_edges=np.stack([right[:-1], right[1:]], axis=1),
        traction=np.array([0.0, traction]),
        load_steps=steps,
    )


@dataclass(frozen=True)
class ComparisonReport:
    """Final-step relative stress errors |P_ref - P| / <|P_ref|> per component."""

    error: np.ndarray
    max_error: np.ndarray
    mean_error: np.ndarray
    micro: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)


def relative_field_error(reference: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Componentwise |ref - test| / mean|ref| over the points of a stress field."""
    scale = np.mean(np.abs(reference), axis=0)
    scale = np.where(scale > 0.0, scale, 1.0)
    return np.abs(reference - test) / scale


def compare_micro_fields(
    solver: RveSolver,
    model: SurrogateModel,
    f_bar: np.ndarray,
    mu: Sequence[float] = (),
) -> Dict[str, np.ndarray]:
    """Microscopic stress of a fresh RVE solve against the surrogate field."""
    reference = solver.solve(f_bar).stress_field.stress
    rotation, stretch = polar_stretch(f_bar)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        predicted = rotation @ model.stress_field(stretch, mu).stress
    error = relative_field_error(reference, predicted)
    return {
        "reference": reference,
        "predicted": predicted,
        "error": error,
        "max_error": error.max(axis=0),
    }


def compare_solutions(
    ref: MacroSolution,
    test: MacroSolution,
    micro_points: Optional[Dict[str, int]] = None,
    solver: Optional[RveSolver] = None,
    model: Optional[SurrogateModel] = None,
    mu: Sequence[float] = (),
) -> ComparisonReport:
    """Compare two macro solutions at their final step.

    ``micro_points`` maps labels to macro quadrature point indices; with a
    ``solver`` and ``model`` the microscopic fields there are compared too.
    """
    if ref.mesh_hash != test.mesh_hash:
        raise MeshMismatchError("Macro solutions were computed on different meshes")
    if ref.n_steps != test.n_steps:
        raise ValueError(f"Step counts differ: {ref.n_steps} vs {test.n_steps}")
    error = relative_field_error(ref.stress[-1], test.stress[-1])
    micro = {}
    if micro_points and solver is not None and model is not None:
        for label, qp in micro_points.items():
            f_qp = ref.deformation[-1, qp]
            micro[label] = compare_micro_fields(solver, model, f_qp, mu)
    return ComparisonReport(
        error=error,
        max_error=error.max(axis=0),
        mean_error=error.mean(axis=0),
        micro=micro,
    )


def save_solution(solution: MacroSolution, path: Union[str, Path]):
    with h5py.File(path, "w") as hf:
        hf.attrs["format"] = SOLUTION_FORMAT
        hf.attrs["version"] = SOLUTION_FORMAT_VERSION
        hf.attrs["mesh_hash"] = solution.mesh_hash.hex()
        hf.attrs["constitutive_calls"] = solution.constitutive_calls
        hf.attrs["assemblies"] = solution.assemblies
        hf.attrs["settings"] = solution.settings
        hf.create_dataset("displacements", data=solution.displacements)
        hf.create_dataset("deformation", data=solution.deformation)
        hf.create_dataset("stress", data=solution.stress)
        hf.create_dataset("iterations", data=np.asarray(solution.iterations))
        hf.create_dataset("step_times", data=np.asarray(solution.step_times))


def load_solution(path: Union[str, Path]) -> MacroSolution:
    try:
        with h5py.File(path, "r") as hf:
            if hf.attrs.get("format") != SOLUTION_FORMAT:
                raise FormatError(f"{path} is not a macro solution archive")
            if int(hf.attrs["version"]) != SOLUTION_FORMAT_VERSION:
                raise FormatError(
                    f"Unsupported macro solution version {int(hf.attrs['version'])}"
                )
            return MacroSolution(
                displacements=hf["displacements"][()],
                deformation=hf["deformation"][()],
                stress=hf["stress"][()],
                iterations=hf["iterations"][()].tolist(),
                step_times=hf["step_times"][()].tolist(),
                constitutive_calls=int(hf.attrs["constitutive_calls"]),
                assemblies=int(hf.attrs["assemblies"]),
                mesh_hash=bytes.fromhex(hf.attrs["mesh_hash"]),
                settings=str(hf.attrs.get("settings", "")),
            )
    except (OSError, KeyError) as e:
        raise FormatError(f"Cannot read macro solution {path}: {e}") from e
