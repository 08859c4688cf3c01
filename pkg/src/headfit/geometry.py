"""Triangle meshes, region partitions, vertex normals and adjacency."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import scipy.sparse as sp


class Region(IntEnum):
    FACE = 0
    EARS = 1
    HAIR = 2
    NECK = 3

    @property
    def key(self) -> str:
        return self.name.lower()


#: regions whose offsets are hard-masked to zero
FIXED_REGIONS = (Region.FACE, Region.EARS)


@dataclass(frozen=True)
class RegionPartition:
    """Per-vertex region labels (one of :class:`Region`)."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        if labels.ndim != 1:
            raise ValueError("region labels must be a 1-d array")
        if labels.size and (labels.min() < 0 or labels.max() > 3):
            raise ValueError("region label out of range")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    def mask(self, *regions: Region) -> np.ndarray:
        return np.isin(self.labels, [int(r) for r in regions])

    def indices(self, *regions: Region) -> np.ndarray:
        return np.flatnonzero(self.mask(*regions))

    @property
    def movable(self) -> np.ndarray:
        """Boolean mask of vertices that may carry offsets (hair and neck)."""
        return self.mask(Region.HAIR, Region.NECK)

    def to_dict(self) -> dict[str, list[int]]:
        return {r.key: self.indices(r).tolist() for r in Region}

    @classmethod
    def from_dict(cls, data: dict, n_vertices: int) -> "RegionPartition":
        labels = np.full(n_vertices, -1, dtype=np.int64)
        for name, idx in data.items():
            try:
                region = Region[name.upper()]
            except KeyError:
                raise ValueError(f"unknown region name {name!r}") from None
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n_vertices):
                raise ValueError(f"region {name!r} has out-of-range vertex index")
            if np.any(labels[idx] >= 0):
                raise ValueError(f"region {name!r} overlaps another region")
            labels[idx] = int(region)
        if np.any(labels < 0):
            raise ValueError("region partition does not cover every vertex")
        return cls(labels)


@dataclass(frozen=True)
class TriMesh:
    """Immutable triangle mesh with texture coordinates and region labels.

    Triangles are wound counter-clockwise when seen from the front.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    uv: np.ndarray | None = None
    regions: RegionPartition | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = v.shape[0]
        if f.size:
            if f.min() < 0 or f.max() >= n:
                raise ValueError("triangle index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("triangle with repeated vertex index")
        uv = self.uv
        if uv is not None:
            uv = np.array(uv, dtype=np.float64).reshape(-1, 2)
            if uv.shape[0] != n:
                raise ValueError("uv must have one row per vertex")
            uv.setflags(write=False)
        regions = self.regions
        if regions is not None:
            if not isinstance(regions, RegionPartition):
                regions = RegionPartition(regions)
            if len(regions) != n:
                raise ValueError("region partition size does not match vertex count")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "regions", regions)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.triangles, self.uv, self.regions)

    def triangles_within(self, *regions: Region) -> np.ndarray:
        """Indices of triangles whose three vertices all lie in ``regions``."""
        if self.regions is None:
            raise ValueError("mesh has no region partition")
        inside = self.regions.mask(*regions)
        return np.flatnonzero(inside[self.triangles].all(axis=1))


_DEGENERATE_AREA = 1e-12
_FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


def compute_vertex_normals(mesh: TriMesh, positions: np.ndarray | None = None) -> np.ndarray:
    """Area-weighted unit vertex normals.

    Each face normal is weighted by its area (the raw cross product).
    Degenerate faces contribute nothing; vertices whose accumulated normal
    vanishes, including isolated ones, get ``(0, 0, 1)``.
    """
    pos = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    if pos.shape != (mesh.n_vertices, 3):
        raise ValueError(f"positions must have shape ({mesh.n_vertices}, 3)")
    f = mesh.triangles
    normals = np.zeros_like(pos)
    if f.size:
        a, b, c = pos[f[:, 0]], pos[f[:, 1]], pos[f[:, 2]]
        cross = np.cross(b - a, c - a)
        area = 0.5 * np.linalg.norm(cross, axis=1)
        cross[area < _DEGENERATE_AREA] = 0.0
        for k in range(3):
            for axis in range(3):
                normals[:, axis] += np.bincount(f[:, k], weights=cross[:, axis], minlength=len(pos))
    norm = np.linalg.norm(normals, axis=1)
    bad = norm < 1e-12
    normals[bad] = _FALLBACK_NORMAL
    norm[bad] = 1.0
    return normals / norm[:, None]


@dataclass(frozen=True)
class VertexAdjacency:
    """Symmetric vertex adjacency in CSR form (neighbors sorted ascending)."""

    indptr: np.ndarray
    indices: np.ndarray
    _laplacian: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.indptr.size - 1

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def uniform_laplacian(self) -> sp.csr_matrix:
        """Sparse ``I - D^-1 A``; rows of isolated vertices are identity rows."""
        if self._laplacian is None:
            n = self.n_vertices
            deg = self.degree()
            rows = np.repeat(np.arange(n), deg)
            vals = -1.0 / deg[rows]
            adj = sp.csr_matrix((vals, self.indices, self.indptr), shape=(n, n))
            lap = (sp.identity(n, format="csr") + adj).tocsr()
            lap.sort_indices()
            object.__setattr__(self, "_laplacian", lap)
        return self._laplacian


def build_adjacency(mesh: TriMesh) -> VertexAdjacency:
    n = mesh.n_vertices
    f = mesh.triangles
    src = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    dst = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    pairs = np.unique(np.stack([src, dst], axis=1), axis=0) if src.size else np.zeros((0, 2), np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(pairs[:, 0], minlength=n), out=indptr[1:])
    return VertexAdjacency(indptr, pairs[:, 1].astype(np.int64))


def _nearest_distances(src: np.ndarray, dst: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest-neighbor scan: distance and index of the nearest ``dst`` row.

    Ties resolve to the lowest index.
    """
    dists = np.empty(len(src))
    idx = np.empty(len(src), dtype=np.int64)
    for start in range(0, len(src), chunk):
        block = src[start:start + chunk]
        d2 = np.zeros((len(block), len(dst)))
        for axis in range(src.shape[1]):
            diff = block[:, axis, None] - dst[None, :, axis]
            d2 += diff * diff
        j = np.argmin(d2, axis=1)
        idx[start:start + chunk] = j
        dists[start:start + chunk] = np.sqrt(d2[np.arange(len(block)), j])
    return dists, idx


def chamfer3d(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric Chamfer distance: half the mean nearest distance each way."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    da, _ = _nearest_distances(a, b)
    db, _ = _nearest_distances(b, a)
    return 0.5 * math.fsum(da) / len(a) + 0.5 * math.fsum(db) / len(b)
