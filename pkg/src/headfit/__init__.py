"""Silhouette-driven head mesh fitting with normal-directed offsets and PCA distillation."""

from .basis import LinearOffsetBasis, coefficient_statistics, edit_coefficient, fit_pca, project, reconstruct_linear
from .blendshape import PoseParams, SkinnedBlendshapeModel, blend, reconstruct, reconstruct_jacobian, skin
from .fitting import AdamState, DivergenceError, FitConfig, FitResult, OffsetField, adam_step, apply_offsets, fit
from .geometry import Region, RegionPartition, TriMesh, build_adjacency, chamfer3d, compute_vertex_normals
from .losses import (LossWeights, chamfer2d_loss, dice_loss, laplacian_loss, occupancy_loss,
                     total_geometric_loss)
from .raster import Camera, RasterConfig, hard_zbuffer, rasterize_soft, rasterize_soft_grad, visible_vertices

__version__ = "0.1.0"
