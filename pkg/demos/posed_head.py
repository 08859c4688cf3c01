"""Blendshapes and skinning on the synthetic head: what each parameter group does.

Run: python3 demos/posed_head.py
"""
import numpy as np

from headfit.blendshape import PoseParams, blend, reconstruct
from headfit.synth import head_mesh, head_model

mesh = head_mesh()
model = head_model(mesh)
print(f"N={model.n_vertices} K={model.n_shape} L={model.n_expression} joints={model.n_joints}"
      f" parents={model.joint_parents.tolist()}")

zero = PoseParams.zeros(model)
print("zero parameters reproduce v_base:", np.array_equal(reconstruct(model, zero), model.v_base))

rng = np.random.default_rng(0)
shape = PoseParams(rng.normal(size=model.n_shape), np.zeros(model.n_expression), zero.joint_rotations)
expr = PoseParams(zero.shape, rng.normal(size=model.n_expression), zero.joint_rotations)
theta = zero.joint_rotations.copy()
theta[1] = [0.0, 0.3, 0.0]  # turn the head
posed = PoseParams(zero.shape, zero.expression, theta)

for name, p in (("shape", shape), ("expression", expr), ("head turn", posed)):
    d = np.linalg.norm(reconstruct(model, p) - model.v_base, axis=1)
    print(f"{name:>10}: mean displacement {d.mean():.4f}, max {d.max():.4f}")

# blending is linear, skinning is not
a, b = rng.normal(size=(2, model.n_shape))
lin = blend(model, a + b, np.zeros(model.n_expression)) - blend(model, a, np.zeros(model.n_expression))
print("blend linearity residual:",
      np.abs(lin - (blend(model, b, np.zeros(model.n_expression)) - model.v_base)).max())
