"""Blendshape blending followed by joint-based linear blend skinning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class PoseParams:
    """Shape coefficients, expression coefficients and per-joint axis-angles (radians)."""

    shape: np.ndarray
    expression: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", np.asarray(self.shape, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "expression", np.asarray(self.expression, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "joint_rotations",
                           np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3))

    @classmethod
    def zeros(cls, model: "SkinnedBlendshapeModel") -> "PoseParams":
        return cls(np.zeros(model.n_shape), np.zeros(model.n_expression), np.zeros((model.n_joints, 3)))

    def to_dict(self) -> dict:
        return {
            "shape": self.shape.tolist(),
            "expression": self.expression.tolist(),
            "joint_rotations": self.joint_rotations.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PoseParams":
        unknown = set(data) - {"shape", "expression", "joint_rotations"}
        if unknown:
            raise ValueError(f"unknown key {sorted(unknown)[0]!r} in pose parameters")
        return cls(data["shape"], data["expression"], data["joint_rotations"])


def _topological_order(parents: np.ndarray) -> np.ndarray:
    n = len(parents)
    order, state = [], np.zeros(n, dtype=np.int8)
    for start in range(n):
        chain = []
        k = start
        while k >= 0 and state[k] == 0:
            state[k] = 1
            chain.append(k)
            k = parents[k]
        if k >= 0 and state[k] == 1:
            raise ValueError("joint_parents contains a cycle")
        for j in reversed(chain):
            state[j] = 2
            order.append(j)
    return np.array(order, dtype=np.int64)


@dataclass(frozen=True)
class SkinnedBlendshapeModel:
    """Parametric head model ``v = skin(v_base + B phi + D psi, theta)``.

    Parameters
    ----------
    v_base : (N, 3) array
    shape_basis : (3N, K) array
        Shape blendshapes, rows ordered vertex by vertex as (x, y, z).
    expr_basis : (3N, L) array
        Expression blendshapes, same row layout.
    joint_regressor : (J, N) array
        Each row sums to one; joints are regressed from blended vertices.
    skin_weights : (N, J) array
        Nonnegative, rows sum to one.
    joint_parents : (J,) int array
        Parent joint index, -1 for roots.
    """

    v_base: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    joint_regressor: np.ndarray
    skin_weights: np.ndarray
    joint_parents: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v_base, dtype=np.float64).reshape(-1, 3)
        n = v.shape[0]
        b = np.asarray(self.shape_basis, dtype=np.float64).reshape(3 * n, -1)
        d = np.asarray(self.expr_basis, dtype=np.float64).reshape(3 * n, -1)
        jr = np.atleast_2d(np.asarray(self.joint_regressor, dtype=np.float64))
        w = np.atleast_2d(np.asarray(self.skin_weights, dtype=np.float64))
        parents = np.asarray(self.joint_parents, dtype=np.int64).reshape(-1)
        n_joints = parents.size
        if jr.shape != (n_joints, n):
            raise ValueError(f"joint_regressor must have shape ({n_joints}, {n}), got {jr.shape}")
        if w.shape != (n, n_joints):
            raise ValueError(f"skin_weights must have shape ({n}, {n_joints}), got {w.shape}")
        if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("skin weight rows must be nonnegative and sum to 1")
        if not np.allclose(jr.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("joint regressor rows must sum to 1")
        if np.any((parents < -1) | (parents >= n_joints)):
            raise ValueError("joint parent index out of range")
        order = _topological_order(parents)
        for name, arr in (("v_base", v), ("shape_basis", b), ("expr_basis", d),
                          ("joint_regressor", jr), ("skin_weights", w), ("joint_parents", parents)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_order", order)

    @property
    def n_vertices(self) -> int:
        return self.v_base.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_expression(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def n_joints(self) -> int:
        return self.joint_parents.size


def blend(model: SkinnedBlendshapeModel, shape, expression) -> np.ndarray:
    """``v_base + B @ shape + D @ expression`` reshaped to (N, 3)."""
    shape = np.asarray(shape, dtype=np.float64).reshape(-1)
    expression = np.asarray(expression, dtype=np.float64).reshape(-1)
    if shape.size != model.n_shape:
        raise ValueError(f"expected {model.n_shape} shape coefficients, got {shape.size}")
    if expression.size != model.n_expression:
        raise ValueError(f"expected {model.n_expression} expression coefficients, got {expression.size}")
    offset = model.shape_basis @ shape + model.expr_basis @ expression
    return model.v_base + offset.reshape(-1, 3)


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (angle = vector norm)."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(w)
    k = _skew(w)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    return (np.eye(3) + (np.sin(angle) / angle) * k
            + ((1.0 - np.cos(angle)) / angle**2) * (k @ k))


def joint_transforms(model: SkinnedBlendshapeModel, blended: np.ndarray, rotations) -> tuple[np.ndarray, np.ndarray]:
    """World affine transform of every joint as (J, 3, 3) rotations and (J, 3) translations.

    Joint ``k`` rotates about its regressed location, composed after its parent's
    transform: ``T_k = T_parent o RotAbout(j_k, R_k)``.
    """
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3)
    if rotations.shape[0] != model.n_joints:
        raise ValueError(f"expected {model.n_joints} joint rotations, got {rotations.shape[0]}")
    joints = model.joint_regressor @ blended
    rot = np.empty((model.n_joints, 3, 3))
    trans = np.empty((model.n_joints, 3))
    for k in model._order:
        r_local = rodrigues(rotations[k])
        t_local = joints[k] - r_local @ joints[k]
        p = model.joint_parents[k]
        if p < 0:
            rot[k], trans[k] = r_local, t_local
        else:
            rot[k] = rot[p] @ r_local
            trans[k] = rot[p] @ t_local + trans[p]
    return rot, trans


def skin(model: SkinnedBlendshapeModel, blended: np.ndarray, rotations) -> np.ndarray:
    """Linear blend skinning: ``v'_i = sum_k W[i, k] T_k(v_i)``."""
    blended = np.asarray(blended, dtype=np.float64)
    if blended.shape != (model.n_vertices, 3):
        raise ValueError(f"blended vertices must have shape ({model.n_vertices}, 3)")
    rot, trans = joint_transforms(model, blended, rotations)
    # written as v + sum_k W_k ((R_k - I) v + t_k) so identity transforms return v bit-exactly
    per_vertex_rot = np.einsum("nk,kab->nab", model.skin_weights, rot - np.eye(3))
    per_vertex_trans = model.skin_weights @ trans
    return blended + (np.einsum("nab,nb->na", per_vertex_rot, blended) + per_vertex_trans)


def reconstruct(model: SkinnedBlendshapeModel, params: PoseParams) -> np.ndarray:
    return skin(model, blend(model, params.shape, params.expression), params.joint_rotations)


def reconstruct_jacobian(model: SkinnedBlendshapeModel, params: PoseParams) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of the flattened reconstruction w.r.t. shape and expression.

    For fixed rotations skinning is a linear map of the blended vertices (the
    joint locations are themselves linear in them), so each Jacobian column
    is the skinned image of the corresponding blendshape.
    """
    theta = params.joint_rotations
    n = model.n_vertices

    def columns(basis):
        out = np.empty_like(basis)
        for k in range(basis.shape[1]):
            out[:, k] = skin(model, basis[:, k].reshape(n, 3), theta).reshape(-1)
        return out

    return columns(model.shape_basis), columns(model.expr_basis)
