"""Point cloud container plus voxel downsampling and normal estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud


@dataclass(frozen=True)
class PointCloud:
    """Scan geometry in its own local frame. Normals, when present, are unit length."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise EmptyCloud("points must be a nonempty (N, 3) array")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        nrm = self.normals
        if nrm is not None:
            nrm = np.asarray(nrm, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.abs(lengths - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)


def voxel_keys(points: np.ndarray, cell: float) -> np.ndarray:
    """Integer (N, 3) voxel coordinates for each point."""
    return np.floor(np.asarray(points, dtype=np.float64) / cell).astype(np.int64)


def voxel_downsample(points: np.ndarray, cell: float):
    """Centroid per occupied voxel, ordered by lexicographic voxel key.

    Returns (centroids (M, 3), counts (M,), inverse (N,)) where inverse maps
    each input point to its voxel row.
    """
    if cell <= 0:
        raise ValueError("cell size must be positive")
    keys = voxel_keys(points, cell)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                      return_counts=True)
    centroids = np.zeros((len(uniq), 3))
    np.add.at(centroids, inverse, points)
    centroids /= counts[:, None]
    return centroids, counts, inverse


def estimate_normals(points: np.ndarray, neighbors: int = 16) -> np.ndarray:
    """Per-point normals from the smallest principal direction of the local
    neighborhood. Signs are arbitrary; consumers must be sign-invariant."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    k = min(neighbors, n)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    if k == 1:
        idx = idx[:, None]
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    # degenerate neighborhoods (single point) fall back to +z
    flat = lengths[:, 0] < 1e-12
    normals[flat] = (0.0, 0.0, 1.0)
    lengths[flat] = 1.0
    return normals / lengths
