"""Meshes: the Mesh type, preset generators and the mesh JSON format.

Presets are assembled from structured blocks. Each block is the linear
blend between an inner and an outer boundary curve; blocks are merged by
coordinate and element orientation is normalised afterwards, so opposite
edges of the unit cell always carry matching node distributions.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .elements import NODES_PER_ELEMENT, QuadratureGeometry, quadrature_geometry
from .exceptions import FormatError, MeshError

logger = logging.getLogger(__name__)

MESH_FORMAT = "rbhomog-mesh"
MESH_FORMAT_VERSION = 1
_MERGE_TOL = 1e-9

MATRIX_PHASE = 0
INCLUSION_PHASE = 1

# fiber volume fraction and pore area fraction of the two RVE presets
FIBER_FRACTION = 0.1256
PORE_FRACTION = 0.14


@dataclass(eq=False)
class Mesh:
    """Unstructured quadrilateral mesh.

    ``periodic_pairs`` rows are ``(master, slave)``: every node on the right
    or top edge of the bounding box is a slave of its image on the left or
    bottom edge, corners map to the lower-left corner.
    """

    nodes: np.ndarray
    elements: np.ndarray
    element_type: str
    phase_ids: np.ndarray
    boundary_nodes: np.ndarray
    periodic_pairs: Optional[np.ndarray] = None
    node_sets: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        self.phase_ids = np.ascontiguousarray(self.phase_ids, dtype=np.int64)
        self.boundary_nodes = np.asarray(self.boundary_nodes, dtype=np.int64)
        if self.periodic_pairs is not None:
            self.periodic_pairs = np.asarray(self.periodic_pairs, dtype=np.int64)
        self.node_sets = {
            k: np.asarray(v, dtype=np.int64) for k, v in self.node_sets.items()
        }
        self._validate()

    def _validate(self):
        if self.element_type not in NODES_PER_ELEMENT:
            raise MeshError(f"Unsupported element type {self.element_type!r}")
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError(f"Nodes must have shape (n, 2), got {self.nodes.shape}")
        nen = NODES_PER_ELEMENT[self.element_type]
        if self.elements.ndim != 2 or self.elements.shape[1] != nen:
            raise MeshError(
                f"{self.element_type} connectivity must have {nen} columns, "
                f"got shape {self.elements.shape}"
            )
        if self.elements.size and (
            self.elements.min() < 0 or self.elements.max() >= self.n_nodes
        ):
            raise MeshError("Element connectivity references missing nodes")
        if self.phase_ids.shape != (self.n_elements,):
            raise MeshError("One phase id per element is required")
        for name, idx in [("boundary", self.boundary_nodes)] + list(
            self.node_sets.items()
        ):
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_nodes):
                raise MeshError(f"Node set {name!r} references missing nodes")
        if self.periodic_pairs is not None:
            self._validate_periodic()
        # forces the Jacobian check
        self.geometry

    def _validate_periodic(self):
        pairs = self.periodic_pairs
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise MeshError("Periodic pairs must have shape (n, 2)")
        masters, slaves = pairs[:, 0], pairs[:, 1]
        if np.unique(slaves).size != slaves.size:
            raise MeshError("A node is paired as slave more than once")
        if np.intersect1d(masters, slaves).size:
            raise MeshError("Periodic pairing is chained (a master is a slave)")
        lo, hi = self.bounds
        delta = self.nodes[slaves] - self.nodes[masters]
        for axis in range(2):
            ok = np.isclose(delta[:, axis], 0.0, atol=_MERGE_TOL) | np.isclose(
                delta[:, axis], hi[axis] - lo[axis], atol=_MERGE_TOL
            )
            if not np.all(ok):
                raise MeshError("Periodic pairs do not map opposite edges")

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_elements(self) -> int:
        return int(self.elements.shape[0])

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    @cached_property
    def geometry(self) -> QuadratureGeometry:
        return quadrature_geometry(self.nodes, self.elements, self.element_type)

    @property
    def n_quadrature_points(self) -> int:
        return self.geometry.n_points

    @property
    def quadrature_phases(self) -> np.ndarray:
        nq = self.geometry.weights.shape[1]
        return np.repeat(self.phase_ids, nq)

    @cached_property
    def digest(self) -> bytes:
        """SHA-256 over element type, coordinates, connectivity and phases."""
        h = hashlib.sha256()
        h.update(self.element_type.encode())
        h.update(self.nodes.astype("<f8").tobytes())
        h.update(self.elements.astype("<i8").tobytes())
        h.update(self.phase_ids.astype("<i8").tobytes())
        return h.digest()

    @property
    def hash(self) -> str:
        return self.digest.hex()

    def area(self) -> float:
        return float(self.geometry.weights.sum())

    def phase_fraction(self, phase: int) -> float:
        """Area of ``phase`` relative to the bounding box."""
        lo, hi = self.bounds
        w = self.geometry.weights.sum(axis=1)
        return float(w[self.phase_ids == phase].sum() / np.prod(hi - lo))

    def porosity(self) -> float:
        """Fraction of the bounding box not covered by elements (holes)."""
        lo, hi = self.bounds
        return float(1.0 - self.area() / np.prod(hi - lo))

    def nearest_quadrature_point(self, point: Sequence[float]) -> int:
        pts = self.geometry.points.reshape(-1, 2)
        return int(np.argmin(np.linalg.norm(pts - np.asarray(point), axis=1)))

    # ---- JSON codec -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MESH_FORMAT,
            "version": MESH_FORMAT_VERSION,
            "element_type": self.element_type,
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "phase_ids": self.phase_ids.tolist(),
            "boundary_nodes": self.boundary_nodes.tolist(),
            "periodic_pairs": None
            if self.periodic_pairs is None
            else self.periodic_pairs.tolist(),
            "node_sets": {k: v.tolist() for k, v in self.node_sets.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mesh":
        if data.get("format") != MESH_FORMAT:
            raise FormatError(f"Not a mesh document (format={data.get('format')!r})")
        if data.get("version") != MESH_FORMAT_VERSION:
            raise FormatError(
                f"Unsupported mesh format version {data.get('version')}, "
                f"expected {MESH_FORMAT_VERSION}"
            )
        try:
            return cls(
                nodes=np.array(data["nodes"], dtype=float),
                elements=np.array(data["elements"], dtype=np.int64),
                element_type=data["element_type"],
                phase_ids=np.array(data["phase_ids"], dtype=np.int64),
                boundary_nodes=np.array(data["boundary_nodes"], dtype=np.int64),
                periodic_pairs=None
                if data.get("periodic_pairs") is None
                else np.array(data["periodic_pairs"], dtype=np.int64),
                node_sets=data.get("node_sets") or {},
            )
        except KeyError as e:
            raise FormatError(f"Mesh document is missing field {e}") from e


def save_mesh(mesh: Mesh, path: Union[str, Path]):
    with open(path, "w") as f:
        json.dump(mesh.to_dict(), f)
    logger.debug(f"Wrote mesh with {mesh.n_elements} elements to {path}")


def load_mesh(path: Union[str, Path]) -> Mesh:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"Mesh file {path} is not valid JSON: {e.msg}", e.pos) from e
    return Mesh.from_dict(data)


# ---- preset generation -----------------------------------------------------


@dataclass(frozen=True)
class MeshSpec:
    """Preset geometry request.

    ``divisions`` is the number of elements along one sector of an O-grid
    (RVE presets) or per side (``unit_square``, ``cook``); ``layers`` the
    radial element counts (fiber: inside the fiber ring, in the matrix;
    porous: around each pore). Zero/empty values select the desk defaults.
    """

    preset: str
    element: Optional[str] = None
    divisions: int = 0
    layers: Tuple[int, ...] = ()
    fraction: float = 0.0
    periodic: bool = True


DESK_DEFAULTS = {
    "unit_square": dict(element="quad4", divisions=8, layers=()),
    "porous": dict(element="quad4", divisions=8, layers=(12,)),
    "fiber": dict(element="quad8", divisions=12, layers=(6, 14)),
    "cook": dict(element="quad4", divisions=4, layers=()),
}

FULL_SCALE = {
    "porous": MeshSpec("porous", divisions=14, layers=(27,)),
    "fiber": MeshSpec("fiber", divisions=20, layers=(14, 35)),
    "cook": MeshSpec("cook", divisions=10),
}


Curve = Callable[[np.ndarray], np.ndarray]


def _segment(a: np.ndarray, b: np.ndarray) -> Curve:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return lambda s: (1.0 - s)[:, None] * a + s[:, None] * b


def _arc(center: np.ndarray, radius: float, theta0: float, theta1: float) -> Curve:
    def curve(s):
        theta = theta0 + s * (theta1 - theta0)
        return center + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)

    return curve


@dataclass
class _Block:
    inner: Curve
    outer: Curve
    ns: int
    nt: int
    phase: int


def _block_elements(block: _Block, order: int, offset: int):
    s = np.linspace(0.0, 1.0, block.ns * order + 1)
    t = np.linspace(0.0, 1.0, block.nt * order + 1)
    a, b = block.inner(s), block.outer(s)
    grid = (1.0 - t)[None, :, None] * a[:, None, :] + t[None, :, None] * b[:, None, :]
    ids = offset + np.arange(grid.shape[0] * grid.shape[1]).reshape(grid.shape[:2])

    i, j = np.meshgrid(
        np.arange(block.ns) * order, np.arange(block.nt) * order, indexing="ij"
    )
    i, j = i.ravel(), j.ravel()
    h = order
    corners = [ids[i, j], ids[i + h, j], ids[i + h, j + h], ids[i, j + h]]
    if order == 2:
        corners += [ids[i + 1, j], ids[i + 2, j + 1], ids[i + 1, j + 2], ids[i, j + 1]]
    conn = np.stack(corners, axis=1)
    return grid.reshape(-1, 2), conn, np.full(conn.shape[0], block.phase)


def _assemble(blocks: List[_Block], element_type: str):
    order = 2 if element_type == "quad8" else 1
    coords, conns, phases = [], [], []
    offset = 0
    for block in blocks:
        xy, conn, phase = _block_elements(block, order, offset)
        coords.append(xy)
        conns.append(conn)
        phases.append(phase)
        offset += xy.shape[0]
    coords = np.concatenate(coords)
    conn = np.concatenate(conns)
    phase = np.concatenate(phases)

    # merge coincident block nodes
    pairs = cKDTree(coords).query_pairs(_MERGE_TOL, output_type="ndarray")
    n = coords.shape[0]
    graph = coo_matrix(
        (np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, labels = connected_components(graph, directed=False)
    conn = labels[conn]
    # drop nodes not referenced (quad8 grids carry unused centre nodes)
    used, conn = np.unique(conn, return_inverse=True)
    conn = conn.reshape(-1, order * 4)
    first = np.zeros(labels.max() + 1, dtype=np.int64)
    first[labels[::-1]] = np.arange(n)[::-1]
    nodes = coords[first[used]]

    # counter-clockwise corner ordering
    p = nodes[conn[:, :4]]
    area = 0.5 * np.sum(
        p[:, :, 0] * np.roll(p[:, :, 1], -1, axis=1)
        - np.roll(p[:, :, 0], -1, axis=1) * p[:, :, 1],
        axis=1,
    )
    flip = area < 0.0
    reorder = [0, 3, 2, 1] + ([7, 6, 5, 4] if order == 2 else [])
    conn[flip] = conn[flip][:, reorder]
    return nodes, conn, phase


def _box_boundary(nodes: np.ndarray) -> np.ndarray:
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    on = np.any(
        np.isclose(nodes, lo, atol=_MERGE_TOL) | np.isclose(nodes, hi, atol=_MERGE_TOL),
        axis=1,
    )
    return np.nonzero(on)[0]


def periodic_pairs(nodes: np.ndarray) -> np.ndarray:
    """Pair right/top edge nodes with their images on the left/bottom edge."""
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    on_hi = np.isclose(nodes, hi, atol=_MERGE_TOL)
    slaves = np.nonzero(np.any(on_hi, axis=1))[0]
    images = np.where(on_hi[slaves], lo, nodes[slaves])
    dist, masters = cKDTree(nodes).query(images)
    if np.any(dist > _MERGE_TOL):
        missing = slaves[dist > _MERGE_TOL]
        raise MeshError(
            f"Mesh is not periodic: {missing.size} edge node(s) without an "
            f"opposite partner, first at {nodes[missing[0]].tolist()}"
        )
    return np.stack([masters, slaves], axis=1)


def _corner_angles(
    center: np.ndarray, lo: np.ndarray, size: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Angles of the cell corners (BR, TR, TL, BL, BR + 2pi) seen from center."""
    corners = lo + size * np.array([[1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    d = corners - center
    theta = np.arctan2(d[:, 1], d[:, 0])
    theta = np.unwrap(theta)
    return np.append(theta, theta[0] + 2.0 * np.pi), np.vstack([corners, corners[:1]])


def _polygon_radius(radius: float, spans: np.ndarray, divisions: int) -> float:
    """Radius whose inscribed polygon encloses the area of ``radius``."""
    polygon = 0.5 * np.sum(divisions * np.sin(spans / divisions))
    return radius * np.sqrt(np.pi / polygon)


def _o_grid(
    lo: np.ndarray,
    size: float,
    center: np.ndarray,
    radius: float,
    divisions: int,
    outer_layers: int,
    element: str,
    inner_layers: int = 0,
    core_ratio: float = 0.5,
) -> List[_Block]:
    """Blocks of a square cell around a circle; the disc itself is meshed
    (fiber) when ``inner_layers`` > 0 and left open (pore) otherwise."""
    theta, corners = _corner_angles(center, lo, size)
    spans = np.diff(theta)
    if element == "quad4":
        radius = _polygon_radius(radius, spans, divisions)
    if radius >= min(np.min(center - lo), np.min(lo + size - center)):
        raise MeshError("Inclusion does not fit inside its cell")
    blocks = []
    core = center + core_ratio * radius * np.array(
        [[1, -1], [1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float
    ) / np.sqrt(2.0)
    for k in range(4):
        arc = _arc(center, radius, theta[k], theta[k + 1])
        blocks.append(
            _Block(arc, _segment(corners[k], corners[k + 1]), divisions,
                   outer_layers, MATRIX_PHASE)
        )
        if inner_layers:
            blocks.append(
                _Block(_segment(core[k], core[k + 1]), arc, divisions,
                       inner_layers, INCLUSION_PHASE)
            )
    if inner_layers:
        blocks.append(
            _Block(_segment(core[3], core[0]), _segment(core[2], core[1]),
                   divisions, divisions, INCLUSION_PHASE)
        )
    return blocks


# pore layout of the porous preset: (cell corner, centre offset, relative radius)
_PORES = [
    ((0.0, 0.0), (-0.03, 0.0), 1.0),
    ((0.5, 0.0), (-0.03, 0.0), 0.75),
    ((0.0, 0.5), (0.03, 0.0), 0.75),
    ((0.5, 0.5), (0.03, 0.0), 1.0),
]


def _porous_blocks(spec: MeshSpec, element: str) -> List[_Block]:
    fraction = spec.fraction or PORE_FRACTION
    rel = np.array([p[2] for p in _PORES])
    base = np.sqrt(fraction / (np.pi * np.sum(rel**2)))
    (layers,) = spec.layers
    blocks = []
    for cell, offset, r in _PORES:
        lo = np.array(cell)
        center = lo + 0.25 + np.array(offset)
        blocks += _o_grid(lo, 0.5, center, base * r, spec.divisions, layers, element)
    return blocks


def _fiber_blocks(spec: MeshSpec, element: str) -> List[_Block]:
    fraction = spec.fraction or FIBER_FRACTION
    radius = np.sqrt(fraction / np.pi)
    inner, outer = spec.layers
    return _o_grid(
        np.zeros(2), 1.0, np.full(2, 0.5), radius, spec.divisions, outer, element,
        inner_layers=inner,
    )


def _unit_square_blocks(spec: MeshSpec, element: str) -> List[_Block]:
    n = spec.divisions
    return [_Block(_segment((0, 0), (1, 0)), _segment((0, 1), (1, 1)), n, n, 0)]


COOK_CORNERS = np.array([[0.0, 0.0], [48.0, 44.0], [48.0, 60.0], [0.0, 44.0]])


def _cook_blocks(spec: MeshSpec, element: str) -> List[_Block]:
    n = spec.divisions
    c = COOK_CORNERS
    return [_Block(_segment(c[0], c[1]), _segment(c[3], c[2]), 2 * n, n, 0)]


_BUILDERS = {
    "unit_square": _unit_square_blocks,
    "porous": _porous_blocks,
    "fiber": _fiber_blocks,
    "cook": _cook_blocks,
}


def resolve_spec(spec: MeshSpec) -> MeshSpec:
    """Fill unset fields of ``spec`` with the desk-scale defaults."""
    if spec.preset not in _BUILDERS:
        raise MeshError(
            f"Unknown mesh preset {spec.preset!r}, expected one of {sorted(_BUILDERS)}"
        )
    d = DESK_DEFAULTS[spec.preset]
    return MeshSpec(
        preset=spec.preset,
        element=spec.element or d["element"],
        divisions=spec.divisions or d["divisions"],
        layers=tuple(spec.layers) or d["layers"],
        fraction=spec.fraction,
        periodic=spec.periodic,
    )


def build_mesh(spec: MeshSpec) -> Mesh:
    """Generate a preset mesh."""
    spec = resolve_spec(spec)
    if spec.divisions < 1 or any(n < 1 for n in spec.layers):
        raise MeshError(f"Mesh resolution must be positive: {spec}")
    blocks = _BUILDERS[spec.preset](spec, spec.element)
    nodes, conn, phase = _assemble(blocks, spec.element)

    node_sets = {}
    pairs = None
    if spec.preset == "cook":
        node_sets["left"] = np.nonzero(np.isclose(nodes[:, 0], 0.0))[0]
        node_sets["right"] = np.nonzero(np.isclose(nodes[:, 0], COOK_CORNERS[1, 0]))[0]
        boundary = np.union1d(node_sets["left"], node_sets["right"])
    else:
        boundary = _box_boundary(nodes)
        if spec.periodic:
            pairs = periodic_pairs(nodes)

    mesh = Mesh(
        nodes=nodes,
        elements=conn,
        element_type=spec.element,
        phase_ids=phase,
        boundary_nodes=boundary,
        periodic_pairs=pairs,
        node_sets=node_sets,
    )
    logger.info(
        f"Built {spec.preset} mesh: {mesh.n_elements} {spec.element} elements, "
        f"{mesh.n_nodes} nodes"
    )
    return mesh
