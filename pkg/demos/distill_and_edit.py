"""Distill a handful of fitted offset fields into a PCA basis, then edit one coefficient.

Small images and short fits keep this under a minute.

Run: python3 demos/distill_and_edit.py
"""
import numpy as np

from headfit.fitting import FitConfig, fit
from headfit.synth import synth_head
from headfit.basis import coefficient_statistics, edit_coefficient, fit_pca, project, reconstruct_linear
from headfit.geometry import Region

fields = []
for seed in range(8):
    head = synth_head(seed, image_size=64, subdivisions=3)
    res = fit(head.model, head.mesh, head.params, head.target_full, head.target_hair, head.camera,
              FitConfig(iterations=150, image_size=64, seed=seed))
    fields.append(res.field.displacements.reshape(-1))
    print(f"seed {seed}: loss {res.trace[0].total:.3g} -> {res.trace[-1].total:.3g}")

data = np.stack(fields, axis=1)
regions = head.mesh.regions
basis = fit_pca(data, regions, k_hair=4, k_neck=2)
print("singular values", np.round(basis.singular_values, 4))
print(f"captured variance {basis.captured_variance():.4f} of "
      f"{((data - basis.mean[:, None]) ** 2).sum():.4f}")

eta = project(basis, data)
recon = basis.mean[:, None] + basis.components @ eta
rel = np.sqrt(((recon - data) ** 2).mean(0)) / np.sqrt((data**2).mean(0))
print("per-field relative error", np.round(rel, 3))

stats = coefficient_statistics(eta.T)
new_eta, edited = edit_coefficient(basis, eta[:, 0], 0, stats["max"][0])
before = reconstruct_linear(basis, eta[:, 0])
moved = np.linalg.norm(edited - before, axis=1)
print(f"setting component 0 to its maximum moves {np.count_nonzero(moved > 1e-12)} vertices;"
      f" neck rows moved: {bool(moved[regions.mask(Region.NECK)].any())}")
