"""Low-rank linear basis of offset fields, fit per region block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Region, RegionPartition

#: order statistics reported by :func:`coefficient_statistics`
QUANTILES = {"min": None, "p10": 0.1, "p25": 0.25, "p75": 0.75, "p90": 0.9, "max": None}


@dataclass(frozen=True)
class LinearOffsetBasis:
    """Mean offset plus orthonormal components with hair/neck block support.

    Attributes
    ----------
    mean : (3N,) array
    components : (3N, K_hair + K_neck) array
        The first ``k_hair`` columns are supported on hair rows only, the
        remaining ``k_neck`` on neck rows only.
    singular_values : (K_hair + K_neck,) array
        Non-increasing within each block.
    """

    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    k_hair: int
    k_neck: int
    centered: bool = True

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=np.float64)
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        sv = np.asarray(self.singular_values, dtype=np.float64).reshape(-1)
        if comps.ndim != 2 or comps.shape[0] != mean.size:
            raise ValueError("components must be (3N, K) with 3N matching the mean")
        if comps.shape[1] != self.k_hair + self.k_neck or sv.size != comps.shape[1]:
            raise ValueError("component count does not match k_hair + k_neck")
        for name, arr in (("mean", mean), ("components", comps), ("singular_values", sv)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 3

    def captured_variance(self) -> float:
        return float(np.sum(self.singular_values**2))


def _block_pca(block: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` left singular vectors and values of ``block`` (rows x samples)."""
    if k == 0 or block.shape[0] == 0:
        return np.zeros((block.shape[0], k)), np.zeros(k)
    u, s, _ = np.linalg.svd(block, full_matrices=False)
    u, s = u[:, :k], s[:k]
    if u.shape[1] < k:
        # more components requested than the block has rows; pad with zeros
        u = np.hstack([u, np.zeros((u.shape[0], k - u.shape[1]))])
        s = np.concatenate([s, np.zeros(k - s.size)])
    # deterministic sign: largest-magnitude entry of each column is positive
    flip = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])])
    flip[flip == 0] = 1.0
    return u * flip, s


def region_rows(regions: RegionPartition, region: Region) -> np.ndarray:
    """Flattened (x, y, z) row indices of the vertices in ``region``."""
    idx = regions.indices(region)
    return (3 * idx[:, None] + np.arange(3)).reshape(-1)


def fit_pca(offsets: np.ndarray, regions: RegionPartition | None = None, k_hair: int = 50,
            k_neck: int | None = None, center: bool = True) -> LinearOffsetBasis:
    """Fit separate hair and neck PCA bases to a (3N, M) matrix of offset fields.

    Each column is one flattened field. With ``regions=None`` all rows form
    a single block and ``k_neck`` must be 0; otherwise it defaults to 10. With ``center=False`` no mean is
    removed, so projection reduces to the plain pseudo-inverse ``F^+ dv``.
    """
    data = np.asarray(offsets, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 1:
        raise ValueError("offsets must be a (3N, M) matrix")
    m = data.shape[1]
    if k_neck is None:
        k_neck = 0 if regions is None else 10
    if k_hair < 0 or k_neck < 0 or k_hair + k_neck < 1:
        raise ValueError("need at least one component")
    if max(k_hair, k_neck) > m:
        raise ValueError(f"cannot keep more components than samples (M={m})")
    if regions is None:
        if k_neck:
            raise ValueError("k_neck requires a region partition")
        blocks = [(np.arange(data.shape[0]), slice(0, k_hair))]
    else:
        if data.shape[0] != 3 * len(regions):
            raise ValueError("offset rows do not match the region partition")
        blocks = [(region_rows(regions, Region.HAIR), slice(0, k_hair)),
                  (region_rows(regions, Region.NECK), slice(k_hair, k_hair + k_neck))]

    mean = data.mean(axis=1) if center else np.zeros(data.shape[0])
    centered = data - mean[:, None]
    comps = np.zeros((data.shape[0], k_hair + k_neck))
    svals = np.zeros(k_hair + k_neck)
    support = np.zeros(data.shape[0], dtype=bool)
    for rows, cols in blocks:
        u, s = _block_pca(centered[rows], cols.stop - cols.start)
        comps[rows, cols] = u
        svals[cols] = s
        support[rows] = True
    # face/ear rows stay exactly zero in the mean as well
    mean = np.where(support, mean, 0.0)
    return LinearOffsetBasis(mean, comps, svals, k_hair, k_neck, center)


def project(basis: LinearOffsetBasis, offsets) -> np.ndarray:
    """Least-squares coefficients ``(F^T F)^+ F^T (dv - mean)``.

    ``offsets`` is an (N, 3) field or a flat 3N-vector, giving a K-vector, or
    a (3N, M) matrix of columns, giving a (K, M) matrix.
    """
    dv = np.asarray(offsets, dtype=np.float64)
    columns = dv.ndim == 2 and dv.shape[0] == basis.mean.size
    flat = dv if columns else dv.reshape(-1, 1)
    if flat.shape[0] != basis.mean.size:
        raise ValueError(f"expected {basis.mean.size} offset entries, got {flat.shape[0]}")
    f = basis.components
    eta = np.linalg.pinv(f.T @ f) @ (f.T @ (flat - basis.mean[:, None]))
    return eta if columns else eta[:, 0]


def reconstruct_linear(basis: LinearOffsetBasis, coefficients) -> np.ndarray:
    """``mean + F @ eta`` as an (N, 3) displacement field."""
    eta = np.asarray(coefficients, dtype=np.float64).reshape(-1)
    if eta.size != basis.n_components:
        raise ValueError(f"expected {basis.n_components} coefficients, got {eta.size}")
    return (basis.mean + basis.components @ eta).reshape(-1, 3)


def edit_coefficient(basis: LinearOffsetBasis, coefficients, index: int, value: float):
    """Replace one coefficient and return the new coefficients and reconstruction."""
    eta = np.array(coefficients, dtype=np.float64).reshape(-1)
    if eta.size != basis.n_components:
        raise ValueError(f"expected {basis.n_components} coefficients, got {eta.size}")
    if not 0 <= index < basis.n_components:
        raise IndexError(f"component index {index} out of range [0, {basis.n_components})")
    eta[index] = value
    return eta, reconstruct_linear(basis, eta)


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Order statistic of rank ``floor(q * M)`` clamped to ``[1, M]`` (1-based)."""
    m = len(sorted_values)
    rank = min(max(int(np.floor(q * m)), 1), m)
    return float(sorted_values[rank - 1])


def coefficient_statistics(dataset) -> dict[str, np.ndarray]:
    """Per-component min, 10%, 25%, 75%, 90% and max over an (M, K) coefficient dataset."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0:
        raise ValueError("empty coefficient dataset")
    ordered = np.sort(data, axis=0)
    out = {}
    for name, q in QUANTILES.items():
        if name == "min":
            out[name] = ordered[0].copy()
        elif name == "max":
            out[name] = ordered[-1].copy()
        else:
            out[name] = np.array([nearest_rank(ordered[:, k], q) for k in range(data.shape[1])])
    return out
