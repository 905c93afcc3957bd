"""Run configuration: Jinja-rendered YAML files turned into a frozen RunConfig.

Config files may call ``env_var(name, default)`` anywhere, e.g.::

    workers: {{ env_var('RBHOMOG_WORKERS', '1') }}
    output_dir: {{ env_var('SCRATCH', '.') }}/porous-run
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import yaml
from jinja2 import Environment, TemplateError

from .exceptions import ConfigError
from .gpr import GprOptions
from .mesh import FULL_SCALE, Mesh, MeshSpec, build_mesh, load_mesh
from .micro_fem import BOUNDARY_CONDITIONS, NewtonOptions
from .sampling import MaterialLayout, MaterialSlot, ParameterSpace
from .tensor_mech import MaterialParams

logger = logging.getLogger(__name__)

PRESETS = ("porous", "fiber")
TWOSCALE_MODES = ("fe2", "surrogate", "both")

# per-preset defaults for keys the file leaves out
PROBLEM_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "porous": {
        "stretch_bounds": ((-0.05, 0.05),) * 3,
        "material": {"phases": {0: {"c1": 1.0, "d1": 1.0}}},
        "include_corners": False,
    },
    "fiber": {
        "stretch_bounds": ((-0.3, 0.3),) * 3,
        "material": {
            "phases": {0: {"c1": 1.0, "d1": 1.0}, 1: {"c1": 100.0, "d1": 100.0}},
            "sampled": [{"phase": 1, "fields": ["c1", "d1"], "bounds": [50.0, 150.0]}],
        },
        "include_corners": True,
    },
}


def _get_env_var(env_var: str, default: Optional[str] = None) -> str:
    """Value of an environment variable, usable as ``env_var()`` in config files."""
    result = default
    if env_var in os.environ:
        result = os.environ[env_var]

    if result is None:
        raise ConfigError(
            f"Could not find environmental variable {env_var} "
            + "and no default value was provided"
        )

    return result


def render_config(raw_text: str) -> Dict[str, Any]:
    """Render ``raw_text`` as a Jinja template, then parse it as YAML."""
    jinja_env = Environment()
    jinja_env.globals["env_var"] = _get_env_var
    try:
        rendered_text = jinja_env.from_string(raw_text).render()
        data = yaml.safe_load(rendered_text) or {}
    except TemplateError as e:
        raise ConfigError(f"Config template error: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("Config must be a mapping at the top level")
    return data


@dataclass(frozen=True)
class TwoScaleConfig:
    """Cook's membrane comparison; ``micro_points`` maps labels to coordinates."""

    elements: int = 4
    traction: float = 0.1
    steps: int = 5
    mode: str = "both"
    material: Optional[Tuple[float, ...]] = None
    micro_points: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: {"A": (47.0, 59.0), "B": (24.0, 37.0)}
    )
    warm_start: bool = True
    perturbation_step: Optional[float] = None
    model: Optional[str] = None
    reference: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    problem: str = "porous"
    element: Optional[str] = None
    divisions: int = 0
    layers: Tuple[int, ...] = ()
    full_scale: bool = False
    bc: str = "linear"
    stretch_bounds: Tuple[Tuple[float, float], ...] = ((-0.05, 0.05),) * 3
    material: MaterialLayout = field(
        default_factory=lambda: MaterialLayout({0: MaterialParams(1.0, 1.0)})
    )
    n_train: int = 50
    n_test: int = 200
    include_corners: bool = False
    n_pod: Optional[int] = None
    n_reg: Optional[int] = None
    basis_size: Optional[int] = None
    energy: Optional[float] = None
    l_sweep: Tuple[int, ...] = ()
    n_pod_sweep: Tuple[int, ...] = ()
    n_reg_sweep: Tuple[int, ...] = ()
    skip_failures: bool = False
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    gpr: GprOptions = field(default_factory=GprOptions)
    twoscale: TwoScaleConfig = field(default_factory=TwoScaleConfig)
    seed: int = 0
    workers: int = 1
    output_dir: str = "./rbhomog-out"

    def __post_init__(self):
        if self.bc not in BOUNDARY_CONDITIONS:
            raise ConfigError(
                f"Unknown boundary condition {self.bc!r}, expected one of "
                f"{BOUNDARY_CONDITIONS}"
            )
        if len(self.stretch_bounds) != 3:
            raise ConfigError("stretch_bounds needs three (lo, hi) pairs")
        for lo, hi in self.stretch_bounds:
            if not lo < hi or lo <= -1.0:
                raise ConfigError(f"Invalid stretch bound ({lo}, {hi})")
        if self.n_train < 2 or self.n_test < 1:
            raise ConfigError("n_train must be >= 2 and n_test >= 1")
        for name in ("n_pod", "n_reg"):
            value = getattr(self, name)
            if value is not None and not 1 <= value <= self.n_train:
                raise ConfigError(f"{name} = {value} outside [1, n_train]")
        if self.n_reg is not None and self.n_reg < 2:
            raise ConfigError("n_reg must be at least 2")
        n_pod = self.n_pod or self.n_train
        if self.basis_size is not None and self.basis_size > n_pod:
            raise ConfigError(
                f"basis_size {self.basis_size} exceeds the number of POD snapshots"
            )
        if self.energy is not None and not 0.0 < self.energy <= 1.0:
            raise ConfigError(f"energy must lie in (0, 1], got {self.energy}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.twoscale.mode not in TWOSCALE_MODES:
            raise ConfigError(
                f"Unknown twoscale mode {self.twoscale.mode!r}, expected one of "
                f"{TWOSCALE_MODES}"
            )

    @property
    def is_preset(self) -> bool:
        return self.problem in PRESETS

    def mesh_spec(self) -> MeshSpec:
        if not self.is_preset:
            raise ConfigError(f"Problem {self.problem!r} is a mesh file, not a preset")
        if self.full_scale:
            spec = FULL_SCALE[self.problem]
            return replace(spec, element=self.element, periodic=self.bc == "periodic")
        return MeshSpec(
            self.problem,
            element=self.element,
            divisions=self.divisions,
            layers=self.layers,
            periodic=self.bc == "periodic",
        )

    def build_mesh(self) -> Mesh:
        if self.is_preset:
            return build_mesh(self.mesh_spec())
        return load_mesh(self.problem)

    def parameter_space(self) -> ParameterSpace:
        return ParameterSpace(self.stretch_bounds, self.material)

    def basis_selector(self) -> Dict[str, Any]:
        if self.basis_size is None and self.energy is None:
            return {"n_modes": min(20, self.n_pod or self.n_train)}
        return {"n_modes": self.basis_size, "energy": self.energy}

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["material"] = {
            "phases": {
                str(k): {"c1": v.c1, "d1": v.d1}
                for k, v in sorted(self.material.base.items())
            },
            "sampled": [asdict(s) for s in self.material.slots],
        }
        return data

    def digest(self, keys: Optional[Sequence[str]] = None) -> str:
        """Hash of the settings that influence results.

        ``keys`` restricts the hash to some top-level fields; by default
        everything except ``workers``, ``output_dir`` and file paths counts.
        """
        data = self.to_dict()
        for key in ("workers", "output_dir"):
            data.pop(key)
        data["twoscale"].pop("model")
        data["twoscale"].pop("reference")
        if keys is not None:
            data = {k: data[k] for k in keys}
        text = json.dumps(data, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()

    def twoscale_material(self) -> Tuple[float, ...]:
        """Material values of the two-scale run; slot midpoints by default."""
        if self.twoscale.material is not None:
            return self.twoscale.material
        return tuple(0.5 * (s.bounds[0] + s.bounds[1]) for s in self.material.slots)


def _take(section: Mapping[str, Any], cls, where: str, convert=None) -> Dict[str, Any]:
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"Unknown key(s) in {where}: {sorted(unknown)}")
    out = dict(section)
    for key, fn in (convert or {}).items():
        if key in out and out[key] is not None:
            out[key] = fn(out[key])
    return out


def _int_tuple(value) -> Tuple[int, ...]:
    return tuple(int(v) for v in value)


def _pairs(value) -> Tuple[Tuple[float, float], ...]:
    return tuple((float(lo), float(hi)) for lo, hi in value)


def _material(section: Mapping[str, Any]) -> MaterialLayout:
    unknown = set(section) - {"phases", "sampled"}
    if unknown:
        raise ConfigError(f"Unknown key(s) in material: {sorted(unknown)}")
    phases = section.get("phases") or {}
    if not phases:
        raise ConfigError("material.phases must define at least one phase")
    base = {
        int(k): MaterialParams(float(v["c1"]), float(v["d1"]))
        for k, v in phases.items()
    }
    slots = tuple(
        MaterialSlot(
            int(s["phase"]),
            tuple(str(f) for f in s["fields"]),
            (float(s["bounds"][0]), float(s["bounds"][1])),
        )
        for s in section.get("sampled") or ()
    )
    return MaterialLayout(base, slots)


def build_run_config(
    data: Mapping[str, Any], base_dir: Union[str, Path, None] = None
) -> RunConfig:
    """Validate a parsed config mapping; relative mesh/model paths use ``base_dir``."""
    data = dict(data)
    problem = str(data.get("problem", "porous"))
    defaults = dict(PROBLEM_DEFAULTS.get(problem, PROBLEM_DEFAULTS["porous"]))
    if problem not in PRESETS:
        problem = _resolve(problem, base_dir)
        defaults["include_corners"] = False
    try:
        resolution = data.pop("resolution", None) or {}
        unknown = set(resolution) - {"divisions", "layers", "full_scale"}
        if unknown:
            raise ConfigError(f"Unknown key(s) in resolution: {sorted(unknown)}")
        newton_section = data.pop("newton", {}) or {}
        newton = NewtonOptions(**_take(newton_section, NewtonOptions, "newton"))
        gpr = GprOptions(
            **_take(
                data.pop("gpr", {}) or {},
                GprOptions,
                "gpr",
                {"bounds": lambda b: (float(b[0]), float(b[1]))},
            )
        )
        twoscale_section = _take(
            data.pop("twoscale", {}) or {},
            TwoScaleConfig,
            "twoscale",
            {
                "material": lambda m: tuple(float(v) for v in m),
                "micro_points": lambda p: {
                    str(k): (float(v[0]), float(v[1])) for k, v in p.items()
                },
            },
        )
        for key in ("model", "reference"):
            if twoscale_section.get(key):
                twoscale_section[key] = _resolve(twoscale_section[key], base_dir)
        twoscale = TwoScaleConfig(**twoscale_section)
        material = _material(data.pop("material", None) or defaults["material"])
        data.setdefault("stretch_bounds", defaults["stretch_bounds"])
        data.setdefault("include_corners", defaults["include_corners"])
        data["problem"] = problem
        top = _take(
            data,
            RunConfig,
            "config",
            {
                "stretch_bounds": _pairs,
                "l_sweep": _int_tuple,
                "n_pod_sweep": _int_tuple,
                "n_reg_sweep": _int_tuple,
                "seed": int,
                "workers": int,
                "n_train": int,
                "n_test": int,
            },
        )
        return RunConfig(
            divisions=int(resolution.get("divisions", 0)),
            layers=_int_tuple(resolution.get("layers", ())),
            full_scale=bool(resolution.get("full_scale", False)),
            material=material,
            newton=newton,
            gpr=gpr,
            twoscale=twoscale,
            **top,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e


def _resolve(path: str, base_dir: Union[str, Path, None]) -> str:
    p = Path(path)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    return str(p)


def load_run_config(
    path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Load a run config file; non-None ``overrides`` replace file values."""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found at {config_path}")
    with open(config_path, "r") as f:
        raw_text = f.read()
    data = render_config(raw_text)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    config = build_run_config(data, base_dir=config_path.parent)
    logger.debug(f"Loaded run config from {config_path} (Jinja rendered)")
    return config
