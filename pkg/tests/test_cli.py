"""End-to-end tests of the ``rbhomog`` command line."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from rbhomog import __version__, cli
from rbhomog.cli import (
    EXIT_CONFIG,
    EXIT_SOLVER,
    LOCKFILE,
    MANIFEST,
    build_parser,
    main,
    reference_mismatch,
    reference_settings,
)
from rbhomog.config import load_run_config
from rbhomog.exceptions import InvertedElementError
from rbhomog.macro_fem import MacroSolution, cooks_membrane, save_solution

CONFIGS = Path(__file__).parent / "configs"
TINY = str(CONFIGS / "porous-tiny.yml")
FIBER = str(CONFIGS / "fiber-twoscale.yml")


def _run(command, config, out, *extra):
    return main([command, "--config", config, "--out", str(out), *extra])


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("RBHOMOG_TEST_NTRAIN", "RBHOMOG_TEST_OUT", "RBHOMOG_TEST_ENERGY"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train -> evaluate -> report on the coarse porous cell."""
    out = tmp_path_factory.mktemp("pipeline")
    for command in ("generate", "train", "evaluate", "report"):
        assert _run(command, TINY, out) == 0, command
    return out


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_config_is_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["generate"])


@pytest.mark.integration
def test_pipeline_outputs(pipeline):
    for name in (
        "mesh.json",
        "train.snap",
        "test.snap",
        "train_snapshots.csv",
        "model.h5",
        "spectrum.csv",
        "spectrum.dat",
        "spectrum_npod6.csv",
        "train_report.json",
        "errors.csv",
        "l_sweep.csv",
        "sweep_npod_nreg.csv",
        "evaluate_summary.json",
        "basis_1.vtk",
        "report.json",
    ):
        assert (pipeline / name).exists(), name
    assert not (pipeline / LOCKFILE).exists()


@pytest.mark.integration
def test_pipeline_reports(pipeline):
    manifest = json.loads((pipeline / MANIFEST).read_text())
    assert set(manifest["stages"]) == {"generate", "train", "evaluate", "report"}
    assert manifest["rbhomog"] == __version__
    assert "train.snap" in manifest["stages"]["train"]["inputs"]

    train_report = json.loads((pipeline / "train_report.json").read_text())
    assert train_report["basis_size"] == 4
    assert train_report["n_pod"] == 12

    summary = json.loads((pipeline / "evaluate_summary.json").read_text())
    assert summary["n_test"] == 4
    assert len(summary["sweep"]) == 4
    assert summary["max_error"] >= summary["mean_error"] >= 0.0

    header = (pipeline / "train_snapshots.csv").read_text().splitlines()[0]
    assert header.startswith("index,") and header.endswith("P11,P12,P21,P22")
    assert len((pipeline / "l_sweep.csv").read_text().splitlines()) == 1 + 3

    report = json.loads((pipeline / "report.json").read_text())
    assert "train_report" in report and "l_sweep" in report


@pytest.mark.integration
def test_missing_upstream_output(tmp_path):
    assert _run("train", TINY, tmp_path) == EXIT_CONFIG
    assert not (tmp_path / MANIFEST).exists()


def test_bad_config(tmp_path):
    assert _run("generate", str(CONFIGS / "unknown-key.yml"), tmp_path) == EXIT_CONFIG
    assert _run("generate", str(tmp_path / "absent.yml"), tmp_path) == EXIT_CONFIG


def test_locked_output_directory(tmp_path):
    (tmp_path / LOCKFILE).write_text("4242")
    assert _run("generate", TINY, tmp_path) == EXIT_CONFIG
    assert not (tmp_path / "mesh.json").exists()
    assert (tmp_path / LOCKFILE).exists()


@pytest.mark.integration
def test_changed_config_needs_force(tmp_path):
    """A different seed invalidates the generated snapshots."""
    assert _run("generate", TINY, tmp_path) == 0
    assert _run("train", TINY, tmp_path, "--seed", "99") == EXIT_CONFIG
    assert not (tmp_path / "model.h5").exists()
    assert _run("train", TINY, tmp_path, "--seed", "99", "--force") == 0
    assert (tmp_path / "model.h5").exists()


@pytest.mark.integration
def test_snapshots_independent_of_workers(tmp_path):
    serial, threaded = tmp_path / "serial", tmp_path / "threaded"
    assert _run("generate", TINY, serial, "--workers", "1") == 0
    assert _run("generate", TINY, threaded, "--workers", "3") == 0
    for name in ("train.snap", "test.snap", "mesh.json"):
        assert (serial / name).read_bytes() == (threaded / name).read_bytes()


def test_twoscale_without_model(tmp_path):
    assert _run("twoscale", FIBER, tmp_path) == EXIT_CONFIG
    assert not (tmp_path / "surrogate.h5").exists()


@pytest.mark.slow
@pytest.mark.integration
def test_surrogate_twoscale_run(tmp_path):
    for command in ("generate", "train", "twoscale"):
        assert _run(command, FIBER, tmp_path) == 0, command
    summary = json.loads((tmp_path / "twoscale_summary.json").read_text())
    assert summary["iterations"]["surrogate"]
    assert summary["constitutive_calls"]["surrogate"] > 0
    assert set(summary["offline_seconds"]) == {"generate", "train"}
    assert (tmp_path / "surrogate.h5").exists()
    assert not (tmp_path / "fe2.h5").exists()


def _stored_solution(problem, settings="", mesh_hash=None):
    n = problem.mesh.n_nodes
    n_qp = problem.mesh.n_quadrature_points
    steps = problem.load_steps
    return MacroSolution(
        displacements=np.zeros((steps, n, 2)),
        deformation=np.tile(np.eye(2), (steps, n_qp, 1, 1)),
        stress=np.zeros((steps, n_qp, 2, 2)),
        iterations=[1] * steps,
        step_times=[0.1] * steps,
        constitutive_calls=0,
        assemblies=0,
        mesh_hash=problem.mesh.digest if mesh_hash is None else mesh_hash,
        settings=settings,
    )


def test_reference_mismatch():
    problem = cooks_membrane(1, 0.002, 2)
    stored = _stored_solution(problem, settings="abc")
    assert reference_mismatch(stored, problem, "abc") is None
    assert "settings" in reference_mismatch(stored, problem, "abd")
    unlabelled = replace(stored, settings="")
    assert "settings" in reference_mismatch(unlabelled, problem, "abc")
    other_mesh = replace(stored, mesh_hash=bytes(32))
    assert "mesh" in reference_mismatch(other_mesh, problem, "abc")
    longer = cooks_membrane(1, 0.002, 3)
    assert "load steps" in reference_mismatch(stored, longer, "abc")


def test_reference_settings_track_physics_only():
    cfg = load_run_config(FIBER)
    assert reference_settings(cfg) == reference_settings(
        load_run_config(FIBER, {"workers": 4, "output_dir": "elsewhere"})
    )
    stronger = replace(cfg, twoscale=replace(cfg.twoscale, traction=0.003))
    assert reference_settings(stronger) != reference_settings(cfg)
    tighter = replace(cfg, newton=replace(cfg.newton, tol=1e-10))
    assert reference_settings(tighter) != reference_settings(cfg)


def test_inverted_element_is_a_solver_failure(tmp_path, monkeypatch):
    def inverted(cfg, args):
        raise InvertedElementError("Macroscopic deformation gradient has det = -0.5")

    monkeypatch.setitem(cli.COMMANDS, "generate", inverted)
    assert _run("generate", TINY, tmp_path) == EXIT_SOLVER


@pytest.mark.slow
@pytest.mark.integration
def test_stale_reference_is_refused(tmp_path):
    """An fe2.h5 left over from another setup is not compared against."""
    for command in ("generate", "train"):
        assert _run(command, FIBER, tmp_path) == 0, command
    cfg = load_run_config(FIBER)
    ts = cfg.twoscale
    problem = cooks_membrane(ts.elements, ts.traction, ts.steps)
    save_solution(_stored_solution(problem, settings="stale"), tmp_path / "fe2.h5")
    assert _run("twoscale", FIBER, tmp_path) == EXIT_CONFIG
    assert not (tmp_path / "surrogate.h5").exists()
