"""Soft silhouettes of a single triangle as sigma shrinks, and a gradient check.

Run: python3 demos/rasterizer_limits.py
"""
import numpy as np

from headfit.geometry import TriMesh
from headfit.raster import Camera, RasterConfig, rasterize_soft, rasterize_soft_grad

tri = np.array([[-0.8, -0.4, 0.0], [0.8, -0.4, 0.0], [0.0, 0.8, 0.0]])
mesh = TriMesh(tri, [[0, 1, 2]])
cam = Camera()

# pixel (2,2) is inside, (3,2) sits on the bottom edge, (4,2) is outside
print("sigma     inside    edge      outside")
for sigma in (1e-2, 1e-4, 1e-6):
    img = rasterize_soft(mesh, tri, cam, RasterConfig(sigma), 5)
    print(f"{sigma:<9.0e} {img[2, 2]:.6f}  {img[3, 2]:.6f}  {img[4, 2]:.2e}")

# vertex gradient of sum(upstream * occupancy) against central differences; the
# triangle is nudged off-center so no pixel sits where two edges are equally near
tri = tri + [0.031, 0.017, 0.0]
cfg = RasterConfig(1e-2)
up = np.random.default_rng(0).normal(size=(9, 9))
g = rasterize_soft_grad(mesh, tri, cam, cfg, 9, up)
h = 1e-5
fd = np.zeros_like(tri)
for i in range(3):
    for k in range(2):
        step = np.zeros_like(tri)
        step[i, k] = h
        hi = (up * rasterize_soft(mesh, tri + step, cam, cfg, 9)).sum()
        lo = (up * rasterize_soft(mesh, tri - step, cam, cfg, 9)).sum()
        fd[i, k] = (hi - lo) / (2 * h)
print("max |analytic - fd| =", np.abs(g - fd).max())
