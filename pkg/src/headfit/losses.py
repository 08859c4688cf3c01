"""Geometric objectives: occupancy, 2D Chamfer, Laplacian and Dice losses.

Every loss comes with an analytic gradient. :func:`total_geometric_loss`
combines them and routes gradients so that the hair-silhouette term only
reaches hair offsets and the full-silhouette term only reaches neck offsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import Region, TriMesh, VertexAdjacency, _nearest_distances
from .raster import Camera, RasterConfig, SoftRender, pixel_centers, project, visible_vertices


@dataclass(frozen=True)
class LossWeights:
    hair: float = 10.0
    occupancy: float = 1.0
    chamfer: float = 0.01
    laplacian: float = 10.0
    seg: float = 10.0
    occupancy_reduction: str = "mean"

    def __post_init__(self):
        if self.occupancy_reduction not in ("sum", "mean"):
            raise ValueError("occupancy_reduction must be 'sum' or 'mean'")
        for f in fields(self):
            if f.name == "occupancy_reduction":
                continue
            value = getattr(self, f.name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"loss weight {f.name!r} must be a finite nonnegative number")

    def as_dict(self) -> dict[str, float]:
        """Numeric weights keyed by term name."""
        return {f.name: float(getattr(self, f.name)) for f in fields(self) if f.name != "occupancy_reduction"}


@dataclass
class LossReport:
    """Unweighted term values, their weights and the weighted total."""

    terms: dict[str, float]
    weights: dict[str, float]
    total: float = 0.0

    def __post_init__(self):
        self.total = math.fsum(self.weights[k] * v for k, v in self.terms.items())

    def to_dict(self) -> dict:
        return {"terms": dict(self.terms), "weights": dict(self.weights), "total": self.total}


def _check_same_shape(*images):
    shape = np.shape(images[0])
    for img in images[1:]:
        if np.shape(img) != shape:
            raise ValueError(f"image size mismatch: {shape} vs {np.shape(img)}")


def squared_error(pred, target, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Squared L2 image difference (summed or averaged over pixels) and its gradient w.r.t. ``pred``."""
    _check_same_shape(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if reduction == "sum":
        return float(np.sum(diff * diff)), 2.0 * diff
    if reduction == "mean":
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    raise ValueError(f"unknown reduction {reduction!r}")


def occupancy_loss(o_hair, o_full, s_hair, s_full, w_hair: float = 10.0, w_full: float = 1.0,
                   reduction: str = "mean") -> float:
    """``w_hair * |o_hair - s_hair|^2 + w_full * |o_full - s_full|^2``."""
    return occupancy_loss_grad(o_hair, o_full, s_hair, s_full, w_hair, w_full, reduction)[0]


def occupancy_loss_grad(o_hair, o_full, s_hair, s_full, w_hair: float = 10.0, w_full: float = 1.0,
                        reduction: str = "mean"):
    """Value plus gradients w.r.t. ``o_hair`` and ``o_full``."""
    _check_same_shape(o_hair, o_full, s_hair, s_full)
    vh, gh = squared_error(o_hair, s_hair, reduction)
    vf, gf = squared_error(o_full, s_full, reduction)
    return w_hair * vh + w_full * vf, w_hair * gh, w_full * gf


def chamfer2d_loss_grad(projected, samples) -> tuple[float, np.ndarray]:
    """Symmetric 2D Chamfer distance with a ``1 / (2 N)`` normalization.

    The gradient is taken w.r.t. ``projected`` only; ``samples`` are data.
    Nearest-neighbor ties go to the lowest index and the gradient of a zero
    distance is taken as zero.
    """
    p_hat = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    p = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(p_hat) == 0 or len(p) == 0:
        raise ValueError("empty point set")
    if len(p_hat) != len(p):
        raise ValueError("projected and sampled point sets must have the same size")
    n = len(p_hat)
    d_fwd, nn_fwd = _nearest_distances(p_hat, p)
    d_bwd, nn_bwd = _nearest_distances(p, p_hat)
    value = 0.5 * math.fsum(d_fwd) / n + 0.5 * math.fsum(d_bwd) / n

    grad = np.zeros_like(p_hat)
    diff = p_hat - p[nn_fwd]
    safe = np.where(d_fwd > 0, d_fwd, 1.0)
    grad += np.where(d_fwd[:, None] > 0, diff / safe[:, None], 0.0) / (2 * n)
    diff = p_hat[nn_bwd] - p
    safe = np.where(d_bwd > 0, d_bwd, 1.0)
    contrib = np.where(d_bwd[:, None] > 0, diff / safe[:, None], 0.0) / (2 * n)
    for axis in range(2):
        grad[:, axis] += np.bincount(nn_bwd, weights=contrib[:, axis], minlength=n)
    return value, grad


def chamfer2d_loss(projected, samples) -> float:
    return chamfer2d_loss_grad(projected, samples)[0]


def sample_mask_points(mask, count: int, seed) -> np.ndarray:
    """Draw ``count`` pixel centers (as NDC xy) with probability proportional to mask value."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError("mask must be a 2-d image")
    if not np.any(mask > 0.5):
        raise ValueError("empty mask")
    weights = np.clip(mask.reshape(-1), 0.0, None)
    rng = np.random.default_rng(seed)
    idx = rng.choice(weights.size, size=int(count), p=weights / weights.sum())
    h, w = mask.shape
    xs, ys = pixel_centers((h, w))
    return np.stack([xs[idx % w], ys[idx // w]], axis=1)


def laplacian_loss_grad(offsets, adjacency: VertexAdjacency) -> tuple[float, np.ndarray]:
    """``mean_i || dv_i - mean_{j in N(i)} dv_j ||_1`` and its (sub)gradient.

    Vertices without neighbors contribute ``||dv_i||_1``; the subgradient of
    ``|x|`` at zero is zero.
    """
    dv = np.asarray(offsets, dtype=np.float64)
    if dv.shape[0] != adjacency.n_vertices:
        raise ValueError("adjacency does not cover all offset rows")
    lap = adjacency.uniform_laplacian()
    residual = lap @ dv
    n = dv.shape[0]
    value = float(np.abs(residual).sum() / n)
    grad = lap.T @ np.sign(residual) / n
    return value, np.asarray(grad)


def laplacian_loss(offsets, adjacency: VertexAdjacency) -> float:
    return laplacian_loss_grad(offsets, adjacency)[0]


def dice_loss_grad(pred, target) -> tuple[float, np.ndarray]:
    """``1 - 2 (pred . target) / (|pred|^2 + |target|^2)`` and its gradient w.r.t. ``pred``."""
    _check_same_shape(pred, target)
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    dot = float(np.sum(a * b))
    den = float(np.sum(a * a) + np.sum(b * b))
    if den == 0:
        raise ValueError("undefined Dice")
    value = 1.0 - 2.0 * dot / den
    grad = -2.0 * (b * den - 2.0 * dot * a) / den**2
    return value, grad


def dice_loss(pred, target) -> float:
    return dice_loss_grad(pred, target)[0]


@dataclass
class Scene:
    """Everything the geometric objective needs besides the offset coefficients.

    ``base`` is the pre-offset reconstruction and ``normals`` its vertex
    normals, held fixed while the coefficients change.
    """

    mesh: TriMesh
    base: np.ndarray
    normals: np.ndarray
    camera: Camera
    target_full: np.ndarray
    target_hair: np.ndarray
    raster: RasterConfig = field(default_factory=RasterConfig)
    adjacency: VertexAdjacency | None = None

    def __post_init__(self):
        from .geometry import build_adjacency

        if self.mesh.regions is None:
            raise ValueError("scene mesh needs a region partition")
        _check_same_shape(self.target_full, self.target_hair)
        self.target_full = np.asarray(self.target_full, dtype=np.float64)
        self.target_hair = np.asarray(self.target_hair, dtype=np.float64)
        if self.adjacency is None:
            self.adjacency = build_adjacency(self.mesh)
        regions = self.mesh.regions
        self.movable = regions.movable
        self.hair_rows = regions.mask(Region.HAIR)
        self.neck_rows = regions.mask(Region.NECK)
        self.hair_triangles = self.mesh.triangles_within(Region.HAIR, Region.FACE, Region.EARS)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.target_full.shape

    def displacements(self, coeffs: np.ndarray) -> np.ndarray:
        return np.where(self.movable[:, None], coeffs * self.normals, 0.0)


@dataclass
class LossResult:
    report: LossReport
    grad: np.ndarray
    """Gradient w.r.t. the offset coefficients (routed and masked)."""
    term_grads: dict[str, np.ndarray]
    """Weighted per-term contributions to ``grad``."""
    position_grad: np.ndarray
    """Routed gradient w.r.t. the offset vertex positions (before the coefficient chain rule)."""
    o_full: np.ndarray
    o_hair: np.ndarray


def total_geometric_loss(scene: Scene, coeffs: np.ndarray, weights: LossWeights,
                         sample_seed=0) -> LossResult:
    """Weighted geometric loss with region-routed gradients.

    The hair silhouette is rendered from triangles in hair, face and ears;
    its gradient is kept only on non-neck rows. The full silhouette (and the
    Dice term on it) keeps gradient only on non-hair rows. Offsets are
    ``coeffs * normals`` on hair and neck rows, zero elsewhere, so face and
    ear coefficients never receive gradient.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = scene.mesh.n_vertices
    if coeffs.shape != (n, 3):
        raise ValueError(f"coefficients must have shape ({n}, 3)")
    dv = scene.displacements(coeffs)
    pos = scene.base + dv
    size = scene.image_size
    zeros = np.zeros((n, 3))
    terms, pos_grads = {}, {}

    # third channel duplicates the full silhouette so the Dice term keeps its own gradient
    render = SoftRender(scene.mesh, pos, scene.camera, scene.raster, size, (scene.hair_triangles, None, None))
    o_hair, o_full = render.occupancy(0), render.occupancy(1)

    terms["hair"], up_hair = squared_error(o_hair, scene.target_hair, weights.occupancy_reduction)
    terms["occupancy"], up_full = squared_error(o_full, scene.target_full, weights.occupancy_reduction)
    try:
        terms["seg"], up_seg = dice_loss_grad(o_full, scene.target_full)
    except ValueError:
        terms["seg"], up_seg = 0.0, np.zeros(size)

    g_hair, g_full, g_seg = render.backward(weights.hair * up_hair, weights.occupancy * up_full,
                                            weights.seg * up_seg)
    # detach neck vertices from the hair silhouette and hair vertices from the full one
    pos_grads["hair"] = np.where(scene.neck_rows[:, None], 0.0, g_hair)
    pos_grads["occupancy"] = np.where(scene.hair_rows[:, None], 0.0, g_full)
    pos_grads["seg"] = np.where(scene.hair_rows[:, None], 0.0, g_seg)

    visible = visible_vertices(scene.mesh, pos, scene.camera, size)
    idx = np.flatnonzero(visible)
    if idx.size and np.any(scene.target_full > 0.5):
        p2, _ = project(scene.camera, pos[idx])
        samples = sample_mask_points(scene.target_full, idx.size, sample_seed)
        terms["chamfer"], g2 = chamfer2d_loss_grad(p2, samples)
        g = zeros.copy()
        g[idx] = weights.chamfer * scene.camera.scale * g2 @ scene.camera.rotation[:2, :]
        pos_grads["chamfer"] = g
    else:
        terms["chamfer"], pos_grads["chamfer"] = 0.0, zeros

    terms["laplacian"], g_lap = laplacian_loss_grad(dv, scene.adjacency)

    term_grads = {}
    for name, g in pos_grads.items():
        term_grads[name] = np.where(scene.movable[:, None], g * scene.normals, 0.0)
    term_grads["laplacian"] = np.where(scene.movable[:, None], weights.laplacian * g_lap * scene.normals, 0.0)

    grad = np.zeros((n, 3))
    position_grad = np.zeros((n, 3))
    for name in ("hair", "occupancy", "seg", "chamfer", "laplacian"):
        grad += term_grads[name]
    for name in ("hair", "occupancy", "seg", "chamfer"):
        position_grad += pos_grads[name]

    report = LossReport(terms, weights.as_dict())
    return LossResult(report, grad, term_grads, position_grad, o_full, o_hair)
