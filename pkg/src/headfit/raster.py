"""Weak-perspective projection and differentiable soft silhouette rasterization.

Screen conventions: NDC spans ``[-1, 1]^2`` with y pointing up. Pixel column
``c`` has its center at ``x = (c + 0.5) * 2 / W - 1`` and row ``r`` (row 0 at
the top) at ``y = 1 - (r + 0.5) * 2 / H``. The viewer sits on the +z side,
so a larger depth is nearer and counter-clockwise screen-space triangles
are front-facing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np
from numba import njit

from .geometry import TriMesh


@dataclass(frozen=True)
class Camera:
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(2)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not self.scale > 0:
            raise ValueError("camera scale must be positive")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6, rtol=0):
            raise ValueError("camera rotation must be orthonormal")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": self.translation.tolist(),
                "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        unknown = set(data) - {"scale", "translation", "rotation"}
        if unknown:
            raise ValueError(f"unknown key {sorted(unknown)[0]!r} in camera")
        return cls(data.get("scale", 1.0), data.get("translation", [0.0, 0.0]),
                   data.get("rotation", np.eye(3).tolist()))


@dataclass(frozen=True)
class RasterConfig:
    """Soft rasterizer parameters.

    sigma : float
        Sharpness of the per-triangle sigmoid, in squared NDC units.
    eps : float
        Per-triangle influence is clamped to ``1 - eps`` before the
        log-space product; influences below ``eps**2`` are culled.
    """

    sigma: float = 1e-4
    eps: float = 1e-7

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")

    @property
    def cull_radius(self) -> float:
        # outside this distance sigmoid(-d^2 / sigma) < eps**2
        return float(np.sqrt(2.0 * self.sigma * np.log(1.0 / self.eps)))


def _image_shape(image_size) -> tuple[int, int]:
    if np.isscalar(image_size):
        h = w = int(image_size)
    else:
        h, w = (int(s) for s in image_size)
    if h < 1 or w < 1:
        raise ValueError("image size must be at least 1")
    return h, w


def project(camera: Camera, vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return NDC xy coordinates ``s * (R v)_xy + t`` and depth ``(R v)_z``."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    rotated = v @ camera.rotation.T
    return camera.scale * rotated[:, :2] + camera.translation, rotated[:, 2]


def pixel_centers(image_size) -> tuple[np.ndarray, np.ndarray]:
    """NDC x of each column and y of each row."""
    h, w = _image_shape(image_size)
    xs = (np.arange(w) + 0.5) * (2.0 / w) - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) * (2.0 / h)
    return xs, ys


def ndc_to_pixel(points: np.ndarray, image_size) -> np.ndarray:
    """Continuous (column, row) coordinates of NDC points."""
    h, w = _image_shape(image_size)
    p = np.asarray(points, dtype=np.float64)
    col = (p[..., 0] + 1.0) / 2.0 * w - 0.5
    row = (1.0 - p[..., 1]) / 2.0 * h - 0.5
    return np.stack([col, row], axis=-1)


def _candidate_pairs(tri2d: np.ndarray, image_size, pad: float):
    """Enumerate (triangle, pixel) pairs whose pixel center lies in the padded bbox.

    Pairs are ordered by triangle, then row-major by pixel.
    """
    h, w = _image_shape(image_size)
    lo = tri2d.min(axis=1) - pad
    hi = tri2d.max(axis=1) + pad
    col_lo = np.clip(np.ceil((lo[:, 0] + 1.0) / 2.0 * w - 0.5), 0, w).astype(np.int64)
    col_hi = np.clip(np.floor((hi[:, 0] + 1.0) / 2.0 * w - 0.5), -1, w - 1).astype(np.int64)
    row_lo = np.clip(np.ceil((1.0 - hi[:, 1]) / 2.0 * h - 0.5), 0, h).astype(np.int64)
    row_hi = np.clip(np.floor((1.0 - lo[:, 1]) / 2.0 * h - 0.5), -1, h - 1).astype(np.int64)
    nx = np.maximum(col_hi - col_lo + 1, 0)
    ny = np.maximum(row_hi - row_lo + 1, 0)
    counts = nx * ny
    tri = np.repeat(np.arange(len(tri2d)), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(counts.sum()) - np.repeat(starts, counts)
    nx_t = nx[tri]
    col = col_lo[tri] + local % nx_t
    row = row_lo[tri] + local // nx_t
    return tri, row, col


def _edge_functions(tri: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """(3, P) cross products of each edge with the pixel offset from the edge start."""
    out = np.empty((3, px.size))
    for e in range(3):
        a = tri[:, e]
        b = tri[:, (e + 1) % 3]
        out[e] = (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])
    return out


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def _bbox(tri, h, w, pad):
    lo_x = min(tri[0, 0], tri[1, 0], tri[2, 0]) - pad
    hi_x = max(tri[0, 0], tri[1, 0], tri[2, 0]) + pad
    lo_y = min(tri[0, 1], tri[1, 1], tri[2, 1]) - pad
    hi_y = max(tri[0, 1], tri[1, 1], tri[2, 1]) + pad
    c0 = max(math.ceil((lo_x + 1.0) / 2.0 * w - 0.5), 0)
    c1 = min(math.floor((hi_x + 1.0) / 2.0 * w - 0.5), w - 1)
    r0 = max(math.ceil((1.0 - hi_y) / 2.0 * h - 0.5), 0)
    r1 = min(math.floor((1.0 - lo_y) / 2.0 * h - 0.5), h - 1)
    return int(c0), int(c1), int(r0), int(r1)


@njit(cache=True)
def _edge_data(tri):
    """Edge vectors and inverse squared lengths (0 for degenerate edges)."""
    ed = np.empty((3, 3))
    for e in range(3):
        ex = tri[(e + 1) % 3, 0] - tri[e, 0]
        ey = tri[(e + 1) % 3, 1] - tri[e, 1]
        len2 = ex * ex + ey * ey
        ed[e, 0], ed[e, 1] = ex, ey
        ed[e, 2] = 1.0 / len2 if len2 > 0 else 0.0
    return ed


@njit(cache=True)
def _pixel_triangle(tri, ed, px, py, cut2):
    """Classify a pixel center against a triangle.

    Returns (status, edge, t, dist2) where status is 1 inside, -1 outside and
    0 when the pixel is outside by more than ``sqrt(cut2)``. ``edge`` is the
    nearest edge (lowest index on ties) and ``t`` the clamped foot parameter.
    """
    c0 = ed[0, 0] * (py - tri[0, 1]) - ed[0, 1] * (px - tri[0, 0])
    c1 = ed[1, 0] * (py - tri[1, 1]) - ed[1, 1] * (px - tri[1, 0])
    c2 = ed[2, 0] * (py - tri[2, 1]) - ed[2, 1] * (px - tri[2, 0])
    pos = (c0 > 0) + (c1 > 0) + (c2 > 0)
    neg = (c0 < 0) + (c1 < 0) + (c2 < 0)
    inside = (pos + neg > 0) and (pos == 0 or neg == 0)
    if not inside:
        # a violated edge's line distance bounds the distance to the triangle from below;
        # which sign counts as violated follows the winding
        area2 = ed[0, 0] * ed[1, 1] - ed[0, 1] * ed[1, 0]
        orient = 1.0 if area2 > 0 else (-1.0 if area2 < 0 else 0.0)
        if (c0 * orient < 0 and c0 * c0 * ed[0, 2] > cut2) or (c1 * orient < 0 and c1 * c1 * ed[1, 2] > cut2) \
                or (c2 * orient < 0 and c2 * c2 * ed[2, 2] > cut2):
            return 0, 0, 0.0, 0.0
    best_e = 0
    best_t = 0.0
    best_d2 = np.inf
    for e in range(3):
        qx, qy = px - tri[e, 0], py - tri[e, 1]
        ex, ey = ed[e, 0], ed[e, 1]
        t = min(max((qx * ex + qy * ey) * ed[e, 2], 0.0), 1.0)
        rx, ry = qx - t * ex, qy - t * ey
        d2 = rx * rx + ry * ry
        if d2 < best_d2:
            best_e, best_t, best_d2 = e, t, d2
    return (1 if inside else -1), best_e, best_t, best_d2


@njit(cache=True)
def _soft_forward(tri2d, member, h, w, sigma, eps, pad, log_empty):
    # logit beyond which the influence is clamped to 1 - eps, and below which it is dropped (< eps^2)
    hi = math.log((1.0 - eps) / eps)
    lo = -2.0 * math.log(1.0 / eps)
    log_clamped = math.log1p(-(1.0 - eps))
    n_ch = member.shape[1]
    cut2 = pad * pad
    for f in range(tri2d.shape[0]):
        tri = tri2d[f]
        ed = _edge_data(tri)
        c0, c1, r0, r1 = _bbox(tri, h, w, pad)
        for row in range(r0, r1 + 1):
            py = 1.0 - (row + 0.5) * (2.0 / h)
            for col in range(c0, c1 + 1):
                px = (col + 0.5) * (2.0 / w) - 1.0
                status, e, t, d2 = _pixel_triangle(tri, ed, px, py, cut2)
                if status == 0:
                    continue
                x = status * d2 / sigma
                if x < lo:
                    continue
                # log(1 - sigmoid(x)) = -softplus(x)
                if x >= hi:
                    val = log_clamped
                elif x > 0:
                    val = -x - math.log1p(math.exp(-x))
                else:
                    val = -math.log1p(math.exp(x))
                pix = row * w + col
                for c in range(n_ch):
                    if member[f, c]:
                        log_empty[c, pix] += val


@njit(cache=True)
def _soft_backward(tri2d, faces, member, h, w, sigma, eps, pad, keep, upstream, grad2):
    hi = math.log((1.0 - eps) / eps)
    lo = -2.0 * math.log(1.0 / eps)
    n_ch = member.shape[1]
    cut2 = pad * pad
    for f in range(tri2d.shape[0]):
        tri = tri2d[f]
        ed = _edge_data(tri)
        c0, c1, r0, r1 = _bbox(tri, h, w, pad)
        for row in range(r0, r1 + 1):
            py = 1.0 - (row + 0.5) * (2.0 / h)
            for col in range(c0, c1 + 1):
                pix = row * w + col
                active = False
                for c in range(n_ch):
                    if member[f, c] and upstream[c, pix] != 0.0:
                        active = True
                if not active:
                    continue
                px = (col + 0.5) * (2.0 / w) - 1.0
                status, e, t, d2 = _pixel_triangle(tri, ed, px, py, cut2)
                if status == 0:
                    continue
                sgn = float(status)
                x = sgn * d2 / sigma
                if x < lo or x >= hi:
                    continue
                d = _sigmoid(x)
                # dO/dD = prod over the other triangles of (1 - D); dD/d(dist2) = sgn D (1 - D) / sigma
                base = sgn / sigma * d
                e1 = (e + 1) % 3
                rx = px - (tri[e, 0] + t * ed[e, 0])
                ry = py - (tri[e, 1] + t * ed[e, 1])
                va, vb = faces[f, e], faces[f, e1]
                for c in range(n_ch):
                    if not member[f, c]:
                        continue
                    coef = upstream[c, pix] * keep[c, pix] * base
                    # d(dist2)/da = -2 r (1 - t), d(dist2)/db = -2 r t
                    ga = -2.0 * (1.0 - t) * coef
                    gb = -2.0 * t * coef
                    grad2[c, va, 0] += ga * rx
                    grad2[c, va, 1] += ga * ry
                    grad2[c, vb, 0] += gb * rx
                    grad2[c, vb, 1] += gb * ry


class SoftRender:
    """Soft rasterization of one or more triangle groups sharing the same geometry.

    Each group ("channel") gets its own occupancy image; :meth:`backward`
    maps per-channel upstream images to per-channel position gradients.
    """

    def __init__(self, mesh: TriMesh, positions, camera: Camera, config: RasterConfig | None,
                 image_size, groups=(None,)):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (mesh.n_vertices, 3):
            raise ValueError(f"positions must have shape ({mesh.n_vertices}, 3)")
        if not np.all(np.isfinite(positions)):
            raise ValueError("non-finite vertex positions")
        self.shape = _image_shape(image_size)
        self.config = config = config or RasterConfig()
        self.camera = camera
        self.n_vertices = mesh.n_vertices
        member = np.zeros((mesh.n_triangles, len(groups)), dtype=np.bool_)
        for c, group in enumerate(groups):
            if group is None:
                member[:, c] = True
            else:
                member[np.asarray(group, dtype=np.int64), c] = True
        used = member.any(axis=1)
        self.faces = np.ascontiguousarray(mesh.triangles[used])
        self.member = np.ascontiguousarray(member[used])
        p2, _ = project(camera, positions)
        self.tri2d = np.ascontiguousarray(p2[self.faces])
        h, w = self.shape
        self.log_empty = np.zeros((len(groups), h * w))
        if len(self.faces):
            _soft_forward(self.tri2d, self.member, h, w, config.sigma, config.eps, config.cull_radius,
                          self.log_empty)

    def occupancy(self, channel: int = 0) -> np.ndarray:
        h, w = self.shape
        return (0.0 - np.expm1(self.log_empty[channel])).reshape(h, w)

    def backward(self, *upstreams) -> list[np.ndarray]:
        h, w = self.shape
        n_ch = self.log_empty.shape[0]
        if len(upstreams) != n_ch:
            raise ValueError(f"expected {n_ch} upstream images")
        up = np.zeros((n_ch, h * w))
        for c, u in enumerate(upstreams):
            u = np.asarray(u, dtype=np.float64)
            if u.shape != (h, w):
                raise ValueError(f"upstream must have shape ({h}, {w})")
            up[c] = u.reshape(-1)
        g2 = np.zeros((n_ch, self.n_vertices, 2))
        if len(self.faces):
            _soft_backward(self.tri2d, self.faces, self.member, h, w, self.config.sigma, self.config.eps,
                           self.config.cull_radius, np.exp(self.log_empty), up, g2)
        jac = self.camera.scale * self.camera.rotation[:2, :]
        return [g @ jac for g in g2]


def rasterize_soft(mesh: TriMesh, positions, camera: Camera, config: RasterConfig | None = None,
                   image_size=64, triangles=None) -> np.ndarray:
    """Soft silhouette ``O(p) = 1 - prod_f (1 - sigmoid(sign * d^2 / sigma))``.

    ``sign`` is +1 for pixel centers inside the projected triangle and -1
    outside; ``d`` is the distance to the triangle boundary. Influences are
    clamped to ``1 - eps`` and multiplied in log space; pairs whose influence
    would be below ``eps**2`` are skipped. ``triangles`` optionally restricts
    rendering to a subset of triangle indices. Back-facing triangles
    contribute like front-facing ones.
    """
    return SoftRender(mesh, positions, camera, config, image_size, (triangles,)).occupancy()


def rasterize_soft_grad(mesh: TriMesh, positions, camera: Camera, config: RasterConfig | None = None,
                        image_size=64, upstream=None, triangles=None) -> np.ndarray:
    """Gradient of ``sum(upstream * rasterize_soft(...))`` w.r.t. vertex positions.

    The inside/outside sign is treated as locally constant.
    """
    return SoftRender(mesh, positions, camera, config, image_size, (triangles,)).backward(upstream)[0]


def hard_zbuffer(mesh: TriMesh, positions, camera: Camera, image_size, front_only: bool = True):
    """Rasterize depth with a z-buffer (nearest = largest depth).

    Returns the depth image (``-inf`` where empty) and the index of the
    winning triangle per pixel (``-1`` where empty; lowest index on ties).
    """
    h, w = _image_shape(image_size)
    p2, depth = project(camera, positions)
    faces = mesh.triangles
    tri2d = p2[faces]
    area2 = ((tri2d[:, 1, 0] - tri2d[:, 0, 0]) * (tri2d[:, 2, 1] - tri2d[:, 0, 1])
             - (tri2d[:, 1, 1] - tri2d[:, 0, 1]) * (tri2d[:, 2, 0] - tri2d[:, 0, 0]))
    keep = area2 > 0 if front_only else area2 != 0
    face_ids = np.flatnonzero(keep)
    zbuf = np.full(h * w, -np.inf)
    winner = np.full(h * w, -1, dtype=np.int64)
    if face_ids.size == 0:
        return zbuf.reshape(h, w), winner.reshape(h, w)
    tri, row, col = _candidate_pairs(tri2d[face_ids], (h, w), 0.0)
    xs, ys = pixel_centers((h, w))
    px, py = xs[col], ys[row]
    t2 = tri2d[face_ids][tri]
    edges = _edge_functions(t2, px, py)
    sgn = np.sign(area2[face_ids][tri])
    inside = (edges * sgn >= 0).all(axis=0)
    tri, px, py, edges = tri[inside], px[inside], py[inside], edges[:, inside]
    pix = (row * w + col)[inside]
    # barycentric weight of vertex k is the edge function of the opposite edge
    bary = edges[[1, 2, 0]] / area2[face_ids][tri]
    zs = depth[faces[face_ids[tri]]]
    z = (bary.T * zs).sum(axis=1)
    np.maximum.at(zbuf, pix, z)
    top = z >= zbuf[pix]
    best = np.full(h * w, np.iinfo(np.int64).max)
    np.minimum.at(best, pix[top], face_ids[tri[top]])
    winner = np.where(best == np.iinfo(np.int64).max, -1, best)
    return zbuf.reshape(h, w), winner.reshape(h, w)


def visible_vertices(mesh: TriMesh, positions, camera: Camera, image_size, tol: float = 1e-4) -> np.ndarray:
    """Boolean mask of vertices visible from the camera.

    A vertex is visible when it belongs to a front-facing triangle, projects
    inside the image, and is not occluded at its nearest pixel: that pixel is
    empty, is won by a triangle incident to the vertex, or holds a depth no
    more than ``tol`` in front of the vertex.
    """
    h, w = _image_shape(image_size)
    positions = np.asarray(positions, dtype=np.float64)
    p2, depth = project(camera, positions)
    faces = mesh.triangles
    n = mesh.n_vertices
    if faces.size == 0:
        return np.zeros(n, dtype=bool)
    tri2d = p2[faces]
    area2 = ((tri2d[:, 1, 0] - tri2d[:, 0, 0]) * (tri2d[:, 2, 1] - tri2d[:, 0, 1])
             - (tri2d[:, 1, 1] - tri2d[:, 0, 1]) * (tri2d[:, 2, 0] - tri2d[:, 0, 0]))
    front = area2 > 0
    on_front = np.zeros(n, dtype=bool)
    on_front[faces[front].reshape(-1)] = True

    pix = np.rint(ndc_to_pixel(p2, (h, w))).astype(np.int64)
    in_image = (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
    zbuf, winner = hard_zbuffer(mesh, positions, camera, (h, w))
    col = np.clip(pix[:, 0], 0, w - 1)
    row = np.clip(pix[:, 1], 0, h - 1)
    z_at = zbuf[row, col]
    win_at = winner[row, col]
    incident = np.zeros(n, dtype=bool)
    has_win = win_at >= 0
    idx = np.flatnonzero(has_win)
    incident[idx] = (faces[win_at[idx]] == idx[:, None]).any(axis=1)
    unoccluded = (~has_win) | incident | (z_at <= depth + tol)
    return on_front & in_image & unoccluded
