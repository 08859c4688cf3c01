"""Direct optimization of normal-directed offsets against target silhouettes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blendshape import PoseParams, SkinnedBlendshapeModel, reconstruct, reconstruct_jacobian
from .geometry import RegionPartition, TriMesh, compute_vertex_normals
from .losses import LossReport, LossWeights, Scene, total_geometric_loss
from .raster import Camera, RasterConfig

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Raised when the optimization produces a non-finite loss or gradient."""

    def __init__(self, message: str = "diverged", step: int | None = None):
        super().__init__(message if step is None else f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class OffsetField:
    """Per-vertex coefficients ``m`` whose displacement is ``m * n`` on hair and neck rows."""

    coefficients: np.ndarray
    normals: np.ndarray
    regions: RegionPartition

    def __post_init__(self):
        m = np.asarray(self.coefficients, dtype=np.float64)
        n = np.asarray(self.normals, dtype=np.float64)
        if m.shape != n.shape or m.ndim != 2 or m.shape[1] != 3:
            raise ValueError("coefficients and normals must both be (N, 3)")
        if len(self.regions) != m.shape[0]:
            raise ValueError("region partition size does not match the field")
        object.__setattr__(self, "coefficients", m)
        object.__setattr__(self, "normals", n)

    @classmethod
    def zeros(cls, normals: np.ndarray, regions: RegionPartition) -> "OffsetField":
        return cls(np.zeros_like(normals, dtype=np.float64), normals, regions)

    @property
    def displacements(self) -> np.ndarray:
        return np.where(self.regions.movable[:, None], self.coefficients * self.normals, 0.0)


def apply_offsets(base: np.ndarray, offsets: OffsetField) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    if base.shape != offsets.coefficients.shape:
        raise ValueError("base vertices and offset field disagree in shape")
    out = base + offsets.displacements
    fixed = ~offsets.regions.movable
    out[fixed] = base[fixed]
    return out


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, variable, gradient) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected ADAM update; returns the new variable and state."""
    x = np.asarray(variable, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError("gradient shape does not match the variable")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("diverged")
    m = np.zeros_like(x) if state.m is None else state.m
    v = np.zeros_like(x) if state.v is None else state.v
    if m.shape != x.shape:
        raise ValueError("optimizer moments do not match the variable")
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    x = x - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return x, replace(state, step=t, m=m, v=v)


@dataclass(frozen=True)
class FitConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 500
    image_size: tuple[int, int] = (128, 128)
    raster: RasterConfig = field(default_factory=RasterConfig)
    seed: int = 0
    optimize_shape: bool = False
    lr: float = 1e-2
    shape_lr: float = 1e-3
    lr_decay: float = 1e-2
    """Learning rates decay geometrically to this fraction of their start over the run."""
    beta1: float = 0.0
    beta2: float = 0.999

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be at least 1")
        if not (self.lr > 0 and self.shape_lr > 0):
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        size = self.image_size
        size = (int(size), int(size)) if np.isscalar(size) else tuple(int(s) for s in size)
        if len(size) != 2 or min(size) < 1:
            raise ValueError("image_size must be positive")
        object.__setattr__(self, "image_size", size)


@dataclass
class FitResult:
    field: OffsetField
    trace: list[LossReport]
    params: PoseParams
    base: np.ndarray
    routed: dict[str, np.ndarray]
    """Cumulative absolute per-term gradient delivered to each coefficient entry."""

    @property
    def vertices(self) -> np.ndarray:
        return apply_offsets(self.base, self.field)


def compute_iou(pred, target, threshold: float = 0.5) -> float:
    """Intersection over union of the binarized images (1 when both are empty)."""
    a = np.asarray(pred) > threshold
    b = np.asarray(target) > threshold
    if a.shape != b.shape:
        raise ValueError("image size mismatch")
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def step_seed(run_seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(run_seed), int(step)])


def fit(model: SkinnedBlendshapeModel, mesh: TriMesh, params: PoseParams, target_full, target_hair,
        camera: Camera, config: FitConfig | None = None, callback=None) -> FitResult:
    """Optimize offset coefficients (and optionally shape) against two silhouettes.

    ``mesh`` supplies topology and regions; its vertex positions are ignored in
    favor of the model reconstruction. Normals come from the initial
    reconstruction and stay fixed. ``callback(step, result)`` is invoked after
    every loss evaluation.
    """
    config = config or FitConfig()
    target_full = np.asarray(target_full, dtype=np.float64)
    target_hair = np.asarray(target_hair, dtype=np.float64)
    if target_full.shape != target_hair.shape:
        raise ValueError("target masks differ in size")
    if not (np.all(np.isfinite(target_full)) and np.all(np.isfinite(target_hair))):
        raise ValueError("target masks must be finite")
    if np.any(target_hair > target_full + 1e-2):
        logger.warning("hair mask is not contained in the full mask")
    if mesh.regions is None:
        raise ValueError("mesh needs a region partition")

    base = reconstruct(model, params)
    normals = compute_vertex_normals(mesh, base)
    scene = Scene(mesh, base, normals, camera, target_full, target_hair, config.raster)
    coeffs = np.zeros_like(base)
    opt = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    shape = params.shape.copy()
    shape_opt = AdamState(lr=config.shape_lr, beta1=config.beta1, beta2=config.beta2)
    jac_shape = reconstruct_jacobian(model, params)[0] if config.optimize_shape else None

    trace: list[LossReport] = []
    routed = {}
    for step in range(config.iterations):
        result = total_geometric_loss(scene, coeffs, config.weights, step_seed(config.seed, step))
        if not (math.isfinite(result.report.total) and np.all(np.isfinite(result.grad))):
            raise DivergenceError("diverged", step)
        trace.append(result.report)
        for name, g in result.term_grads.items():
            routed[name] = routed.get(name, 0.0) + np.abs(g)
        if callback is not None:
            callback(step, result)
        decay = config.lr_decay ** (step / max(config.iterations - 1, 1))
        opt = replace(opt, lr=config.lr * decay)
        coeffs, opt = adam_step(opt, coeffs, result.grad)
        if config.optimize_shape:
            shape_opt = replace(shape_opt, lr=config.shape_lr * decay)
            shape_grad = jac_shape.T @ result.position_grad.reshape(-1)
            shape, shape_opt = adam_step(shape_opt, shape, shape_grad)
            scene.base = reconstruct(model, replace(params, shape=shape))

    params = replace(params, shape=shape)
    return FitResult(OffsetField(coeffs, normals, mesh.regions), trace, params, scene.base, routed)
