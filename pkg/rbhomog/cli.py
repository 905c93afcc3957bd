"""Command line entry point: ``rbhomog generate|train|evaluate|twoscale|report``.

Every command reads one run config and works inside its output directory.
``manifest.json`` there records, per stage, the config digest and the
SHA-256 of every file written; downstream stages refuse inputs whose hashes
no longer match unless ``--force`` is given.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .config import RunConfig, load_run_config
from .exceptions import (
    ConfigError,
    DegenerateDataError,
    DivergenceError,
    FitError,
    FormatError,
    InvertedElementError,
    MeshError,
)
from .export import write_quadrature_vtk, write_table
from .macro_fem import (
    MacroProblem,
    MacroSolution,
    RveProvider,
    SurrogateProvider,
    compare_solutions,
    cooks_membrane,
    load_solution,
    save_solution,
    solve_macro,
)
from .mesh import load_mesh, save_mesh
from .micro_fem import RveSolver
from .pod import compute_basis
from .snapshots import (
    export_snapshots_csv,
    generate_snapshots,
    load_snapshots,
    save_snapshots,
)
from .surrogate import evaluate_test_set, load_model, save_model, train

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_SOLVER = 3

MANIFEST = "manifest.json"
LOCKFILE = ".rbhomog.lock"

# config fields each stage's results depend on
STAGE_KEYS = {
    "generate": (
        "problem",
        "element",
        "divisions",
        "layers",
        "full_scale",
        "bc",
        "stretch_bounds",
        "material",
        "n_train",
        "n_test",
        "include_corners",
        "skip_failures",
        "newton",
        "seed",
    ),
    "train": ("n_pod", "n_reg", "basis_size", "energy", "gpr"),
}

# micro settings an FE² reference depends on
FE2_KEYS = (
    "problem",
    "element",
    "divisions",
    "layers",
    "full_scale",
    "bc",
    "material",
    "newton",
)


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(out: Path) -> dict:
    path = out / MANIFEST
    if not path.exists():
        return {"stages": {}}
    with open(path) as f:
        return json.load(f)


@contextmanager
def output_lock(out: Path) -> Iterator[None]:
    """Exclusive use of an output directory for the duration of a command."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCKFILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"Output directory {out} is in use by another run (remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink()


class Stage:
    """Bookkeeping of one command: inputs checked, outputs hashed or rolled back."""

    def __init__(self, name: str, cfg: RunConfig, out: Path, force: bool):
        self.name = name
        self.cfg = cfg
        self.out = out
        self.force = force
        self.manifest = read_manifest(out)
        self.inputs: Dict[str, str] = {}
        self.outputs: List[Path] = []
        self.timings: Dict[str, float] = {}

    def _refuse(self, message: str):
        if self.force:
            logger.warning(f"{message}; continuing because of --force")
        else:
            raise ConfigError(f"{message}; rerun the upstream stage or pass --force")

    def require(self, upstream: str, name: str) -> Path:
        """Path of an input file written by ``upstream``, verified by hash."""
        path = self.out / name
        if not path.exists():
            raise ConfigError(f"{path} not found; run 'rbhomog {upstream}' first")
        record = self.manifest["stages"].get(upstream)
        if record is None:
            self._refuse(f"No manifest record for stage {upstream!r}")
            return path
        if upstream in STAGE_KEYS:
            if record["config"] != self.cfg.digest(STAGE_KEYS[upstream]):
                self._refuse(f"Config changed since stage {upstream!r} ran")
        digest = file_digest(path)
        if record["outputs"].get(name) != digest:
            self._refuse(f"{name} changed since stage {upstream!r} wrote it")
        self.inputs[name] = digest
        return path

    def path(self, name: str) -> Path:
        """Register an output file; it is removed if the command fails."""
        path = self.out / name
        self.outputs.append(path)
        return path

    def write_json(self, name: str, data: dict):
        with open(self.path(name), "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)

    def rollback(self):
        for path in self.outputs:
            if path.exists():
                path.unlink()
                logger.debug(f"Removed partial output {path}")

    def commit(self):
        keys = STAGE_KEYS.get(self.name)
        self.manifest.update(
            {
                "rbhomog": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            }
        )
        self.manifest["stages"][self.name] = {
            "config": self.cfg.digest(keys),
            "inputs": self.inputs,
            "outputs": {p.name: file_digest(p) for p in self.outputs if p.exists()},
            "timings": self.timings,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        with open(self.out / MANIFEST, "w") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)


@contextmanager
def run_stage(name: str, cfg: RunConfig, force: bool) -> Iterator[Stage]:
    out = Path(cfg.output_dir)
    with output_lock(out):
        stage = Stage(name, cfg, out, force)
        start = time.perf_counter()
        try:
            yield stage
        except BaseException:
            logger.error(f"Stage {name!r} aborted; removing partial outputs")
            stage.rollback()
            raise
        stage.timings.setdefault("total", time.perf_counter() - start)
        stage.commit()
        logger.info(f"Stage {name!r} finished in {stage.timings['total']:.2f} s")


def _write_tables(stage: Stage, stem: str, columns: Dict[str, Sequence[float]]):
    write_table(stage.path(f"{stem}.csv"), columns)
    write_table(stage.path(f"{stem}.dat"), columns, gnuplot=True)


def _spectrum_columns(eigenvalues: np.ndarray) -> Dict[str, np.ndarray]:
    return {
        "index": np.arange(1, eigenvalues.size + 1),
        "eigenvalue": eigenvalues,
        "relative": eigenvalues / eigenvalues[0],
        "energy": np.cumsum(eigenvalues) / eigenvalues.sum(),
    }


def cmd_generate(cfg: RunConfig, args: argparse.Namespace):
    with run_stage("generate", cfg, args.force) as stage:
        mesh = cfg.build_mesh()
        save_mesh(mesh, stage.path("mesh.json"))
        space = cfg.parameter_space()
        sets = {
            "train": space.sobol(cfg.n_train, include_corners=cfg.include_corners),
            "test": space.uniform(cfg.n_test, cfg.seed),
        }
        for label, points in sets.items():
            start = time.perf_counter()
            snapshots = generate_snapshots(
                points,
                mesh,
                cfg.bc,
                cfg.material,
                cfg.newton,
                workers=cfg.workers,
                skip_failures=cfg.skip_failures,
            )
            stage.timings[label] = time.perf_counter() - start
            save_snapshots(snapshots, stage.path(f"{label}.snap"))
            export_snapshots_csv(
                snapshots, stage.path(f"{label}_snapshots.csv"), space.names
            )


def cmd_train(cfg: RunConfig, args: argparse.Namespace):
    with run_stage("train", cfg, args.force) as stage:
        snapshots = load_snapshots(stage.require("generate", "train.snap"))
        start = time.perf_counter()
        model = train(
            snapshots,
            gpr_opts=cfg.gpr,
            n_pod=cfg.n_pod,
            n_reg=cfg.n_reg,
            box=cfg.parameter_space().box(),
            names=cfg.parameter_space().names,
            workers=cfg.workers,
            **cfg.basis_selector(),
        )
        stage.timings["train"] = time.perf_counter() - start
        save_model(model, stage.path("model.h5"))

        eigenvalues = model.basis.eigenvalues
        _write_tables(stage, "spectrum", _spectrum_columns(eigenvalues))
        for n_pod in cfg.n_pod_sweep:
            prefix = snapshots.prefix(min(n_pod, snapshots.n))
            spectrum = compute_basis(prefix, n_modes=1).eigenvalues
            columns = _spectrum_columns(spectrum)
            _write_tables(stage, f"spectrum_npod{prefix.n}", columns)
        stage.write_json(
            "train_report.json",
            {
                "basis_size": model.size,
                "energy": model.basis.energy_captured,
                "n_pod": cfg.n_pod or snapshots.n,
                "n_reg": cfg.n_reg or snapshots.n,
                "eigenvalues": eigenvalues.tolist(),
                "lengthscales": [list(r.kernel.lengthscales) for r in model.regressors],
                "seconds": stage.timings["train"],
            },
        )
        logger.info(
            f"Basis size L = {model.size}, energy {model.basis.energy_captured:.8f}"
        )


def _error_summary(reports) -> Dict[str, float]:
    eps = np.array([r.effective_stress for r in reports])
    proj = np.array([r.effective_projection for r in reports])
    return {
        "mean_error": float(eps.mean()),
        "max_error": float(eps.max()),
        "mean_projection": float(proj.mean()),
        "max_projection": float(proj.max()),
    }


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace):
    with run_stage("evaluate", cfg, args.force) as stage:
        test = load_snapshots(stage.require("generate", "test.snap"))
        model = load_model(stage.require("train", "model.h5"), test.mesh_hash)
        reports = evaluate_test_set(model, test)
        columns = {"index": np.arange(test.n)}
        for k, name in enumerate(model.names):
            columns[name] = test.params[:, k]
        for field_name in ("effective_stress", "effective_projection"):
            columns[field_name] = [getattr(r, field_name) for r in reports]
        for field_name in ("total", "projection", "regression"):
            columns[f"{field_name}_l2"] = [getattr(r, field_name) for r in reports]
        _write_tables(stage, "errors", columns)
        summary = _error_summary(reports)

        sizes = cfg.l_sweep or range(1, model.size + 1)
        rows = [
            dict(L=n, **_error_summary(evaluate_test_set(model.truncated(n), test)))
            for n in sizes
            if n <= model.size
        ]
        if rows:
            _write_tables(stage, "l_sweep", {k: [r[k] for r in rows] for k in rows[0]})

        sweep = []
        if cfg.n_pod_sweep or cfg.n_reg_sweep:
            snapshots = load_snapshots(stage.require("generate", "train.snap"))
            selector = cfg.basis_selector()
            for n_pod in cfg.n_pod_sweep or (cfg.n_pod or snapshots.n,):
                for n_reg in cfg.n_reg_sweep or (cfg.n_reg or snapshots.n,):
                    n_modes = selector["n_modes"]
                    swept = train(
                        snapshots,
                        n_modes=None if n_modes is None else min(n_modes, n_pod),
                        energy=selector.get("energy"),
                        gpr_opts=cfg.gpr,
                        n_pod=n_pod,
                        n_reg=n_reg,
                        box=(model.lo, model.hi),
                        workers=cfg.workers,
                    )
                    result = _error_summary(evaluate_test_set(swept, test))
                    sweep.append(dict(n_pod=n_pod, n_reg=n_reg, L=swept.size, **result))
                    logger.info(
                        f"N_pod = {n_pod}, N_reg = {n_reg}: mean error "
                        f"{result['mean_error']:.3e}, max {result['max_error']:.3e}"
                    )
            _write_tables(
                stage, "sweep_npod_nreg", {k: [r[k] for r in sweep] for k in sweep[0]}
            )
        stage.write_json(
            "evaluate_summary.json",
            {"basis_size": model.size, "n_test": test.n, **summary, "sweep": sweep},
        )
        logger.info(
            f"Effective stress error: mean {summary['mean_error']:.3e}, "
            f"max {summary['max_error']:.3e} (projection bound mean "
            f"{summary['mean_projection']:.3e})"
        )


def reference_settings(cfg: RunConfig) -> str:
    """Digest of every setting an FE² reference solution depends on."""
    ts = cfg.twoscale
    data = [
        cfg.digest(FE2_KEYS),
        ts.elements,
        ts.traction,
        ts.steps,
        list(cfg.twoscale_material()),
        ts.perturbation_step,
    ]
    return hashlib.sha256(json.dumps(data).encode()).hexdigest()


def reference_mismatch(
    solution: MacroSolution, problem: MacroProblem, settings: str
) -> Optional[str]:
    """Why a stored FE² solution cannot serve as reference, or None."""
    if solution.mesh_hash != problem.mesh.digest:
        return "was solved on a different macro mesh"
    if solution.n_steps != problem.load_steps:
        return f"has {solution.n_steps} load steps, expected {problem.load_steps}"
    if solution.settings != settings:
        return "was computed with different settings"
    return None


def cmd_twoscale(cfg: RunConfig, args: argparse.Namespace):
    ts = cfg.twoscale
    with run_stage("twoscale", cfg, args.force) as stage:
        mesh = cfg.build_mesh()
        mu = cfg.twoscale_material()
        solver = RveSolver(mesh, cfg.bc, cfg.material.materials(mu), cfg.newton)
        problem = cooks_membrane(ts.elements, ts.traction, ts.steps)
        settings = reference_settings(cfg)
        solutions = {}
        seconds = {}

        if ts.mode in ("fe2", "both"):
            provider = RveProvider(
                solver, cfg.workers, ts.warm_start, ts.perturbation_step
            )
            start = time.perf_counter()
            solutions["fe2"] = solve_macro(problem, provider)
            solutions["fe2"].settings = settings
            seconds["fe2"] = time.perf_counter() - start
            save_solution(solutions["fe2"], stage.path("fe2.h5"))
        elif ts.reference or (stage.out / "fe2.h5").exists():
            reference = Path(ts.reference or stage.out / "fe2.h5")
            solutions["fe2"] = load_solution(reference)
            mismatch = reference_mismatch(solutions["fe2"], problem, settings)
            if mismatch:
                stage._refuse(f"FE² reference {reference} {mismatch}")
            stage.inputs[reference.name] = file_digest(reference)
            seconds["fe2"] = float(np.sum(solutions["fe2"].step_times))

        model = None
        if ts.mode in ("surrogate", "both"):
            model_path = Path(ts.model) if ts.model else stage.out / "model.h5"
            if not model_path.exists():
                raise ConfigError(
                    f"Surrogate model {model_path} not found; run 'rbhomog train' or "
                    f"set twoscale.model"
                )
            if not ts.model:
                stage.require("train", "model.h5")
            model = load_model(model_path, mesh.digest)
            provider = SurrogateProvider(model, mu)
            start = time.perf_counter()
            solutions["surrogate"] = solve_macro(problem, provider)
            seconds["surrogate"] = time.perf_counter() - start
            save_solution(solutions["surrogate"], stage.path("surrogate.h5"))

        summary = {
            "seconds": seconds,
            "constitutive_calls": {
                k: s.constitutive_calls for k, s in solutions.items()
            },
            "iterations": {k: s.iterations for k, s in solutions.items()},
            "offline_seconds": {
                k: v["timings"].get("total")
                for k, v in stage.manifest["stages"].items()
                if k in ("generate", "train")
            },
        }
        if "fe2" in solutions and "surrogate" in solutions:
            points = {
                label: problem.mesh.nearest_quadrature_point(xy)
                for label, xy in ts.micro_points.items()
            }
            report = compare_solutions(
                solutions["fe2"], solutions["surrogate"], points, solver, model, mu
            )
            speedup = seconds["fe2"] / seconds["surrogate"]
            summary.update(
                {
                    "speedup": speedup,
                    "max_error": report.max_error.tolist(),
                    "mean_error": report.mean_error.tolist(),
                    "micro_points": points,
                    "micro_max_error": {
                        k: v["max_error"].tolist() for k, v in report.micro.items()
                    },
                }
            )
            xy = problem.mesh.geometry.points.reshape(-1, 2)
            flat = report.error.reshape(-1, 4)
            _write_tables(
                stage,
                "twoscale_errors",
                {
                    "x": xy[:, 0],
                    "y": xy[:, 1],
                    "e11": flat[:, 0],
                    "e12": flat[:, 1],
                    "e21": flat[:, 2],
                    "e22": flat[:, 3],
                },
            )
            write_quadrature_vtk(
                stage.path("twoscale_macro.vtk"),
                problem.mesh,
                {
                    "P_fe2": solutions["fe2"].stress[-1],
                    "P_rom": solutions["surrogate"].stress[-1],
                    "error_yx": report.error[:, 1, 0],
                },
                displacement=solutions["fe2"].displacements[-1],
            )
            for label, fields in report.micro.items():
                write_quadrature_vtk(
                    stage.path(f"twoscale_micro_{label}.vtk"),
                    mesh,
                    {
                        "P_fe2": fields["reference"],
                        "P_rom": fields["predicted"],
                        "error_max": fields["error"].max(axis=(1, 2)),
                    },
                )
            _write_tables(
                stage,
                "timings",
                {
                    "fe2_seconds": [seconds["fe2"]],
                    "surrogate_seconds": [seconds["surrogate"]],
                    "speedup": [speedup],
                    "fe2_calls": [solutions["fe2"].constitutive_calls],
                    "surrogate_calls": [solutions["surrogate"].constitutive_calls],
                },
            )
            logger.info(
                f"Max relative P_yx error {report.max_error[1, 0]:.3e}, "
                f"speedup {speedup:.1f}x"
            )
        stage.write_json("twoscale_summary.json", summary)


def cmd_report(cfg: RunConfig, args: argparse.Namespace):
    n_basis_vtk = 4
    with run_stage("report", cfg, args.force) as stage:
        report = {"manifest": stage.manifest}
        for name in (
            "train_report.json",
            "evaluate_summary.json",
            "twoscale_summary.json",
        ):
            path = stage.out / name
            if path.exists():
                with open(path) as f:
                    report[path.stem] = json.load(f)
        for name in ("l_sweep.csv", "sweep_npod_nreg.csv", "timings.csv"):
            path = stage.out / name
            if path.exists():
                table = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
                with open(path) as f:
                    header = f.readline().strip().split(",")
                report[path.stem] = {
                    h: table[:, k].tolist() for k, h in enumerate(header)
                }
        model_path = stage.out / "model.h5"
        mesh_path = stage.out / "mesh.json"
        if model_path.exists() and mesh_path.exists():
            mesh = load_mesh(mesh_path)
            model = load_model(model_path, mesh.digest)
            for k in range(min(n_basis_vtk, model.size)):
                write_quadrature_vtk(
                    stage.path(f"basis_{k + 1}.vtk"),
                    mesh,
                    {"B": model.basis.functions[k]},
                )
        stage.write_json("report.json", report)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "twoscale": cmd_twoscale,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbhomog",
        description="Stress-field surrogates for computational homogenization",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="run configuration (YAML)")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--workers", type=int, help="worker threads")
    parser.add_argument("--seed", type=int, help="seed of the test-set sampler")
    parser.add_argument(
        "--force", action="store_true", help="accept inputs with mismatched hashes"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_run_config(
            args.config,
            {"output_dir": args.out, "workers": args.workers, "seed": args.seed},
        )
        COMMANDS[args.command](cfg, args)
    except (ConfigError, FormatError, MeshError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except (
        DivergenceError, InvertedElementError, FitError, DegenerateDataError
    ) as e:
        logger.error(str(e))
        return EXIT_SOLVER
    return 0


if __name__ == "__main__":
    sys.exit(main())
