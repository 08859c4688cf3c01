"""Procedural head proxy used for tests, demos and the recovery experiments.

The proxy is a subdivided icosahedron squashed into a head-like ellipsoid,
partitioned into regions by simple latitude/longitude rules:

* neck: the bottom band (``y < -0.55``);
* ears: two small patches on the sides (``|x| > 0.8``, ``-0.3 < y < 0.15``);
* face: the front band (``z > 0.25``, ``-0.55 <= y <= 0.35``);
* hair: everything else (top cap, back and sides).

Coordinates above refer to the unit sphere before squashing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blendshape import PoseParams, SkinnedBlendshapeModel, reconstruct
from .geometry import Region, RegionPartition, TriMesh, build_adjacency, compute_vertex_normals
from .raster import Camera, RasterConfig, rasterize_soft

HEAD_AXES = np.array([0.9, 1.1, 1.0])


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    """Unit icosahedron with outward counter-clockwise faces."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    return v, f


def icosphere(subdivisions: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere; 3 subdivisions give 642 vertices and 1280 triangles."""
    verts, faces = icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new, dtype=np.int64)
    return np.array(verts), faces


def spherical_uv(points: np.ndarray) -> np.ndarray:
    p = points / np.linalg.norm(points, axis=1, keepdims=True)
    u = 0.5 + np.arctan2(p[:, 0], p[:, 2]) / (2 * np.pi)
    v = 0.5 + np.arcsin(np.clip(p[:, 1], -1, 1)) / np.pi
    return np.stack([u, v], axis=1)


def head_partition(unit_points: np.ndarray) -> RegionPartition:
    x, y, z = unit_points.T
    labels = np.full(len(unit_points), int(Region.HAIR), dtype=np.int8)
    neck = y < -0.55
    ears = (np.abs(x) > 0.8) & (y > -0.3) & (y < 0.15)
    face = (z > 0.25) & (y >= -0.55) & (y <= 0.35) & ~ears
    labels[neck] = Region.NECK
    labels[ears] = Region.EARS
    labels[face] = Region.FACE
    return RegionPartition(labels)


def head_mesh(subdivisions: int = 3) -> TriMesh:
    unit, faces = icosphere(subdivisions)
    return TriMesh(unit * HEAD_AXES, faces, spherical_uv(unit), head_partition(unit))


def _poly_features(p: np.ndarray, degree: int = 2) -> np.ndarray:
    x, y, z = p.T
    feats = [np.ones_like(x), x, y, z]
    if degree >= 2:
        feats += [x * x, y * y, z * z, x * y, y * z, z * x]
    return np.stack(feats, axis=1)


def head_model(mesh: TriMesh, n_shape: int = 10, n_expression: int = 5, seed: int = 1234) -> SkinnedBlendshapeModel:
    """Three-joint (neck, head, jaw) blendshape model on the proxy mesh.

    The model is a fixed asset: ``seed`` only selects which smooth fields
    serve as blendshapes.
    """
    rng = np.random.default_rng(seed)
    v = mesh.vertices
    unit = v / HEAD_AXES
    n = len(v)
    feats = _poly_features(unit)

    def smooth_basis(count, scale, support):
        cols = []
        for _ in range(count):
            coef = rng.normal(size=(feats.shape[1], 3))
            cols.append((support[:, None] * (feats @ coef)).reshape(-1))
        basis = np.stack(cols, axis=1)
        basis /= np.sqrt((basis**2).mean(axis=0)) / scale
        return basis

    shape_basis = smooth_basis(n_shape, 0.02, np.ones(n))
    lower_face = np.clip((unit[:, 2] - 0.2) * 2, 0, 1) * np.clip((0.2 - unit[:, 1]) * 2, 0, 1)
    expr_basis = smooth_basis(n_expression, 0.01, lower_face)

    y = unit[:, 1]
    neck_w = np.clip((-0.45 - y) / 0.3, 0, 1)
    jaw_w = (1 - neck_w) * lower_face
    head_w = 1 - neck_w - jaw_w
    skin_weights = np.stack([neck_w, head_w, jaw_w], axis=1)
    skin_weights /= skin_weights.sum(axis=1, keepdims=True)

    def regressor(mask):
        row = mask.astype(np.float64)
        return row / row.sum()

    joint_regressor = np.stack([
        regressor(y < -0.8),
        regressor(np.abs(y) < 0.15),
        regressor((unit[:, 2] > 0.5) & (y < -0.3) & (y > -0.6)),
    ])
    return SkinnedBlendshapeModel(v, shape_basis, expr_basis, joint_regressor, skin_weights, [-1, 0, 1])


def default_camera() -> Camera:
    return Camera(scale=0.55)


def random_params(model: SkinnedBlendshapeModel, rng: np.random.Generator) -> PoseParams:
    theta = np.zeros((model.n_joints, 3))
    theta[1] = rng.uniform(-0.08, 0.08, size=3)
    theta[2, 0] = rng.uniform(0.0, 0.1)
    return PoseParams(rng.normal(size=model.n_shape), rng.normal(scale=0.5, size=model.n_expression), theta)


def _region_taper(mesh: TriMesh, hops: int = 3) -> np.ndarray:
    """Weight rising from 0 next to face/ear vertices to 1 at ``hops`` edges away."""
    adj = build_adjacency(mesh)
    dist = np.where(mesh.regions.movable, hops, 0)
    frontier = np.flatnonzero(~mesh.regions.movable)
    level = 0
    seen = ~mesh.regions.movable
    while frontier.size and level < hops:
        level += 1
        nxt = np.unique(np.concatenate([adj.neighbors(i) for i in frontier]))
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        dist[nxt] = level
        frontier = nxt
    return dist / hops


def ground_truth_coefficients(mesh: TriMesh, base: np.ndarray, normals: np.ndarray,
                              rng: np.random.Generator, rms_fraction: float = 0.05,
                              variation: float = 0.5) -> np.ndarray:
    """Hair-like offset coefficients: a shared outward thickness with a smooth random variation.

    The thickness is ``1 + variation * q(p)`` where ``q`` is a random quadratic
    polynomial of the undeformed position with unit RMS over hair and neck
    vertices. It is applied equally to all three components, so the
    displacement points along the normal. The field is zero on face/ears,
    tapered at their border, and scaled so the RMS displacement over hair and
    neck vertices equals ``rms_fraction`` of the bounding-box diagonal of ``base``.
    """
    movable = mesh.regions.movable
    unit = mesh.vertices / HEAD_AXES
    poly = _poly_features(unit)[:, 1:] @ rng.normal(size=9)
    poly -= poly[movable].mean()
    poly /= np.sqrt((poly[movable] ** 2).mean())
    thickness = (1.0 + variation * poly) * _region_taper(mesh)
    coeffs = np.repeat(thickness[:, None], 3, axis=1)
    coeffs[~movable] = 0.0
    disp = coeffs * normals
    rms = np.sqrt((disp[movable] ** 2).sum(axis=1).mean())
    diag = np.linalg.norm(base.max(axis=0) - base.min(axis=0))
    return coeffs * (rms_fraction * diag / rms)


@dataclass
class SyntheticHead:
    model: SkinnedBlendshapeModel
    mesh: TriMesh
    params: PoseParams
    camera: Camera
    gt_coefficients: np.ndarray
    gt_displacements: np.ndarray
    target_full: np.ndarray
    target_hair: np.ndarray
    raster: RasterConfig = field(default_factory=RasterConfig)

    @property
    def base(self) -> np.ndarray:
        return reconstruct(self.model, self.params)

    @property
    def gt_vertices(self) -> np.ndarray:
        return self.base + self.gt_displacements


def render_targets(mesh: TriMesh, vertices, camera: Camera, raster: RasterConfig, image_size):
    full = rasterize_soft(mesh, vertices, camera, raster, image_size)
    hair_tris = mesh.triangles_within(Region.HAIR, Region.FACE, Region.EARS)
    hair = rasterize_soft(mesh, vertices, camera, raster, image_size, hair_tris)
    return full, hair


def synth_head(seed: int = 0, image_size=128, raster: RasterConfig | None = None,
               subdivisions: int = 3, rms_fraction: float = 0.05) -> SyntheticHead:
    """Synthetic head with random pose and known offsets, plus its rendered silhouettes."""
    raster = raster or RasterConfig()
    mesh = head_mesh(subdivisions)
    model = head_model(mesh)
    rng = np.random.default_rng(seed)
    params = random_params(model, rng)
    base = reconstruct(model, params)
    normals = compute_vertex_normals(mesh, base)
    coeffs = ground_truth_coefficients(mesh, base, normals, rng, rms_fraction)
    disp = np.where(mesh.regions.movable[:, None], coeffs * normals, 0.0)
    camera = default_camera()
    full, hair = render_targets(mesh, base + disp, camera, raster, image_size)
    return SyntheticHead(model, mesh, params, camera, coeffs, disp, full, hair, raster)
