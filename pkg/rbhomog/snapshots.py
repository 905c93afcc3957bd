"""Snapshot generation and the snapshot binary format.

File layout (little endian): a fixed 100-byte header

    magic     8 bytes   b"RBSNAP\\0\\0"
    version   u4
    n_qp      u8        quadrature points per snapshot
    n         u8        snapshots
    d         u8        parameter dimension
    mesh      32 bytes  SHA-256 of the mesh
    provenance 32 bytes SHA-256 of the solver settings

followed by ``n_qp`` weights, ``n * d`` parameters and ``n * n_qp * 4``
stress components, all f8.
"""

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .exceptions import (
    DivergenceError,
    FormatError,
    InvertedElementError,
    MeshMismatchError,
)
from .mesh import Mesh
from .micro_fem import NewtonOptions, QuadratureStressField, RveSolver
from .sampling import MaterialLayout, ParameterPoint

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"RBSNAP\0\0"
SNAPSHOT_VERSION = 1

HEADER = np.dtype(
    [
        ("magic", "u1", (8,)),
        ("version", "<u4"),
        ("n_qp", "<u8"),
        ("n", "<u8"),
        ("d", "<u8"),
        ("mesh_hash", "u1", (32,)),
        ("provenance", "u1", (32,)),
    ]
)


@dataclass
class SnapshotSet:
    """``stress[i]`` is the quadrature stress field generated by ``params[i]``."""

    stress: np.ndarray
    weights: np.ndarray
    params: np.ndarray
    mesh_hash: bytes
    provenance: bytes = bytes(32)

    def __post_init__(self):
        self.stress = np.asarray(self.stress, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        if self.stress.ndim != 4 or self.stress.shape[2:] != (2, 2):
            raise ValueError(
                f"Stress must have shape (n, n_qp, 2, 2), got {self.stress.shape}"
            )
        n, n_qp = self.stress.shape[:2]
        if n < 1:
            raise ValueError("A snapshot set needs at least one snapshot")
        if self.weights.shape != (n_qp,):
            raise ValueError("Weights do not match the quadrature layout")
        if self.params.shape[0] != n:
            raise ValueError(f"{self.params.shape[0]} parameter rows for {n} snapshots")
        if np.unique(self.params, axis=0).shape[0] != n:
            raise ValueError("Snapshot parameter rows must be pairwise distinct")

    @property
    def n(self) -> int:
        return int(self.stress.shape[0])

    @property
    def n_qp(self) -> int:
        return int(self.stress.shape[1])

    @property
    def dimension(self) -> int:
        return int(self.params.shape[1])

    @property
    def points(self) -> List[ParameterPoint]:
        return [ParameterPoint.from_vector(x) for x in self.params]

    def field(self, i: int) -> QuadratureStressField:
        return QuadratureStressField(stress=self.stress[i], weights=self.weights)

    def effective_stress(self) -> np.ndarray:
        return np.einsum("q,nqij->nij", self.weights, self.stress) / self.weights.sum()

    def prefix(self, n: int) -> "SnapshotSet":
        """The first ``n`` snapshots."""
        if not 1 <= n <= self.n:
            raise ValueError(f"Prefix length {n} outside [1, {self.n}]")
        return SnapshotSet(
            self.stress[:n],
            self.weights,
            self.params[:n],
            self.mesh_hash,
            self.provenance,
        )

    def flat(self) -> np.ndarray:
        """Snapshot matrix of shape ``(n, n_qp * 4)``."""
        return self.stress.reshape(self.n, -1)


def provenance_hash(bc: str, layout: MaterialLayout, opts: NewtonOptions) -> bytes:
    doc = {
        "bc": bc,
        "base": {str(k): [v.c1, v.d1] for k, v in sorted(layout.base.items())},
        "slots": [asdict(s) for s in layout.slots],
        "newton": asdict(opts),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()


def generate_snapshots(
    points: Sequence[ParameterPoint],
    mesh: Mesh,
    bc: str,
    layout: MaterialLayout,
    opts: Optional[NewtonOptions] = None,
    workers: int = 1,
    skip_failures: bool = False,
) -> SnapshotSet:
    """Run one RVE solve per parameter point.

    Results are collected by index, so the set is independent of
    ``workers``. Failed points abort the run unless ``skip_failures``.
    """
    opts = opts or NewtonOptions()
    if not points:
        raise ValueError("No parameter points to generate snapshots for")
    local = threading.local()

    def solve(point: ParameterPoint):
        key = tuple(point.material)
        if getattr(local, "key", None) != key:
            local.solver = RveSolver(mesh, bc, layout.materials(point.material), opts)
            local.key = key
        try:
            return local.solver.solve(point.u_bar).stress_field.stress
        except (DivergenceError, InvertedElementError) as e:
            if not skip_failures:
                raise DivergenceError(
                    f"Snapshot at parameters {point.as_vector().tolist()} failed: {e}",
                    residual=getattr(e, "residual", None),
                ) from e
            logger.warning(
                f"Skipping snapshot at parameters {point.as_vector().tolist()}: {e}"
            )
            return None

    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, points))
    else:
        results = [solve(p) for p in points]

    keep = [i for i, r in enumerate(results) if r is not None]
    if not keep:
        raise DivergenceError("Every snapshot solve failed")
    snapshots = SnapshotSet(
        stress=np.stack([results[i] for i in keep]),
        weights=mesh.geometry.weights.ravel().copy(),
        params=np.stack([points[i].as_vector() for i in keep]),
        mesh_hash=mesh.digest,
        provenance=provenance_hash(bc, layout, opts),
    )
    logger.info(
        f"Generated {snapshots.n} snapshots ({len(points) - len(keep)} skipped) in "
        f"{time.perf_counter() - start:.2f} s with {workers} worker(s)"
    )
    return snapshots


def save_snapshots(snapshots: SnapshotSet, path: Union[str, Path]):
    header = np.zeros(1, dtype=HEADER)
    header["magic"] = np.frombuffer(SNAPSHOT_MAGIC, dtype="u1")
    header["version"] = SNAPSHOT_VERSION
    header["n_qp"] = snapshots.n_qp
    header["n"] = snapshots.n
    header["d"] = snapshots.dimension
    header["mesh_hash"] = np.frombuffer(snapshots.mesh_hash, dtype="u1")
    header["provenance"] = np.frombuffer(snapshots.provenance, dtype="u1")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(snapshots.weights.astype("<f8").tobytes())
        f.write(snapshots.params.astype("<f8").tobytes())
        f.write(snapshots.stress.astype("<f8").tobytes())
    logger.debug(f"Wrote {snapshots.n} snapshots to {path}")


def load_snapshots(
    path: Union[str, Path], expected_mesh_hash: Optional[bytes] = None
) -> SnapshotSet:
    """Read a snapshot file, optionally checking it against a mesh hash."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < HEADER.itemsize:
        raise FormatError(f"Snapshot file {path} is truncated in its header", len(buf))
    header = np.frombuffer(buf, dtype=HEADER, count=1)[0]
    if header["magic"].tobytes() != SNAPSHOT_MAGIC:
        raise FormatError(f"{path} is not a snapshot file (bad magic)", 0)
    if header["version"] != SNAPSHOT_VERSION:
        raise FormatError(
            f"Unsupported snapshot format version {int(header['version'])}, "
            f"expected {SNAPSHOT_VERSION}",
            8,
        )
    n_qp, n, d = (int(header[k]) for k in ("n_qp", "n", "d"))
    sizes = [n_qp, n * d, n * n_qp * 4]
    expected = HEADER.itemsize + 8 * sum(sizes)
    if len(buf) != expected:
        raise FormatError(
            f"Snapshot file {path} has {len(buf)} bytes, header describes {expected}",
            min(len(buf), expected),
        )
    offset = HEADER.itemsize
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(buf, dtype="<f8", count=size, offset=offset))
        offset += 8 * size
    mesh_hash = header["mesh_hash"].tobytes()
    if expected_mesh_hash is not None and mesh_hash != expected_mesh_hash:
        raise MeshMismatchError(
            f"Snapshots in {path} were generated on mesh {mesh_hash.hex()[:12]}, "
            f"expected {expected_mesh_hash.hex()[:12]}"
        )
    weights, params, stress = arrays
    try:
        return SnapshotSet(
            stress=stress.reshape(n, n_qp, 2, 2).copy(),
            weights=weights.copy(),
            params=params.reshape(n, d).copy(),
            mesh_hash=mesh_hash,
            provenance=header["provenance"].tobytes(),
        )
    except ValueError as e:
        raise FormatError(f"Snapshot file {path} holds an invalid set: {e}") from e


def export_snapshots_csv(
    snapshots: SnapshotSet, path: Union[str, Path], names: Optional[List[str]] = None
):
    """Parameters and effective stress of every snapshot as CSV."""
    names = names or [f"x{k}" for k in range(snapshots.dimension)]
    table = np.column_stack(
        [
            np.arange(snapshots.n),
            snapshots.params,
            snapshots.effective_stress().reshape(snapshots.n, 4),
        ]
    )
    header = ",".join(["index"] + names + ["P11", "P12", "P21", "P22"])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
