"""Rigid (SE(3)) transforms, closed-form alignment from correspondences, and RANSAC.

Conventions used throughout the package:
  - An absolute scan pose (R, t) maps a world point q into scan-local
    coordinates, p = R @ q + t.
  - A relative edge transform (R_ij, t_ij) maps scan-i coordinates into
    scan-j coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCorrespondences, NoConsensus

_ORTHO_TOL = 1e-8
_RANSAC_CHUNK = 512


def _as_points(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {a.shape}")
    return a


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion: rotation (3x3, det=+1) plus translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies b first, then a: (R_a R_b, R_a t_b + t_a)."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    """Inverse motion (R^T, -R^T t)."""
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def rotation_distance(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic angle between the rotation parts, in radians, clamped to [0, pi]."""
    return rotation_angle(a.rotation.T @ b.rotation)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a single rotation matrix, in [0, pi].

    Equals arccos((trace(R) - 1) / 2) but is evaluated as atan2 of the skew
    part against the trace, which stays accurate near 0 and pi where arccos
    loses half the significant digits.
    """
    c = (np.trace(R) - 1.0) / 2.0
    axis = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(np.linalg.norm(axis), c))


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a near-rotation 3x3 matrix back onto SO(3) (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Exponential map: axis-angle 3-vector to rotation matrix (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired 3D points (source[i] should map onto target[i]) with optional weights."""

    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        src = _as_points(self.source, "source")
        tgt = _as_points(self.target, "target")
        if len(src) == 0:
            raise ValueError("correspondence set must be nonempty")
        if src.shape != tgt.shape:
            raise ValueError("source and target must have the same shape")
        if not (np.isfinite(src).all() and np.isfinite(tgt).all()):
            raise ValueError("correspondence coordinates must be finite")
        w = self.weights
        if w is not None:
            w = np.asarray(w, dtype=np.float64).reshape(-1)
            if len(w) != len(src):
                raise ValueError("weights must match the number of pairs")
            if (w < 0).any() or not np.isfinite(w).all():
                raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.source)


def solve_rigid(corr: CorrespondenceSet) -> RigidTransform:
    """Least-squares rigid transform mapping corr.source onto corr.target.

    Closed form via SVD of the weighted cross-covariance; a negative
    determinant (reflection) is corrected by flipping the smallest singular
    direction, so the result is always a proper rotation.

    Raises DegenerateCorrespondences for fewer than 3 pairs or (near-)collinear
    source points, where the rotation is not uniquely determined.
    """
    src, tgt = corr.source, corr.target
    if len(src) < 3:
        raise DegenerateCorrespondences("need at least 3 correspondence pairs")
    w = corr.weights
    if w is None:
        w = np.ones(len(src))
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateCorrespondences("all correspondence weights are zero")
    w = w / wsum

    c_src = w @ src
    c_tgt = w @ tgt
    src_c = src - c_src
    tgt_c = tgt - c_tgt

    spread = np.linalg.svd(src_c * np.sqrt(w)[:, None], compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1e-12):
        raise DegenerateCorrespondences("source points are collinear or coincident")

    H = (src_c * w[:, None]).T @ tgt_c
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = c_tgt - R @ c_src
    return RigidTransform(R, t)


@dataclass(frozen=True)
class RansacResult:
    transform: RigidTransform
    inlier_mask: np.ndarray = field(repr=False)
    inlier_count: int
    inlier_ratio: float


def _sample_triples(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    if n == 3:
        return np.tile(np.arange(3), (count, 1))
    idx = rng.integers(0, n, size=(count, 3))
    for _ in range(100):
        bad = ((idx[:, 0] == idx[:, 1]) | (idx[:, 0] == idx[:, 2])
               | (idx[:, 1] == idx[:, 2]))
        if not bad.any():
            break
        idx[bad] = rng.integers(0, n, size=(int(bad.sum()), 3))
    return idx


def _kabsch_batch(src: np.ndarray, tgt: np.ndarray):
    """Rigid solve for a (B, 3, 3) batch of point triples. Returns R, t, ok."""
    c_src = src.mean(axis=1, keepdims=True)
    c_tgt = tgt.mean(axis=1, keepdims=True)
    src_c = src - c_src
    tgt_c = tgt - c_tgt

    spread = np.linalg.svd(src_c, compute_uv=False)
    ok = spread[:, 1] > 1e-9 * np.maximum(spread[:, 0], 1e-12)

    H = np.einsum("bki,bkj->bij", src_c, tgt_c)
    U, _, Vt = np.linalg.svd(H)
    V = Vt.transpose(0, 2, 1)
    det = np.linalg.det(np.einsum("bij,bkj->bik", V, U))
    flip = np.ones((len(src), 3))
    flip[:, 2] = np.sign(det)
    R = np.einsum("bij,bj,bkj->bik", V, flip, U)
    t = c_tgt[:, 0, :] - np.einsum("bij,bj->bi", R, c_src[:, 0, :])
    return R, t, ok


def ransac_rigid(corr: CorrespondenceSet, iterations: int = 5000,
                 inlier_threshold: float = 0.05, seed: int = 0) -> RansacResult:
    """Robust rigid estimation over correspondences with minimal samples of 3.

    Best model by inlier count, ties broken by lower mean inlier residual;
    the returned transform is re-solved on the consensus set. Deterministic
    for a fixed seed.
    """
    if inlier_threshold <= 0:
        raise ValueError("inlier_threshold must be positive")
    src, tgt = corr.source, corr.target
    n = len(src)
    if n < 3:
        raise DegenerateCorrespondences("need at least 3 correspondence pairs")

    rng = np.random.Generator(np.random.PCG64(seed))
    best_count = -1
    best_mean = np.inf
    best_mask = None

    done = 0
    while done < iterations:
        m = min(_RANSAC_CHUNK, iterations - done)
        done += m
        samples = _sample_triples(rng, n, m)
        R, t, ok = _kabsch_batch(src[samples], tgt[samples])
        pred = np.einsum("bij,nj->bni", R, src) + t[:, None, :]
        res = np.linalg.norm(pred - tgt[None, :, :], axis=2)
        inl = res <= inlier_threshold
        counts = inl.sum(axis=1)
        counts[~ok] = -1
        order = np.argmax(counts)
        top = counts == counts[order]
        if counts[order] > 0:
            means = np.where(inl, res, 0.0).sum(axis=1) / np.maximum(counts, 1)
            means[~top] = np.inf
            pick = int(np.argmin(means))
            if (counts[pick] > best_count
                    or (counts[pick] == best_count and means[pick] < best_mean)):
                best_count = int(counts[pick])
                best_mean = float(means[pick])
                best_mask = inl[pick].copy()

    if best_count < 3:
        raise NoConsensus("no sample reached 3 inliers")

    mask = best_mask
    transform = None
    for _ in range(3):
        transform = solve_rigid(CorrespondenceSet(src[mask], tgt[mask]))
        res = np.linalg.norm(transform.apply(src) - tgt, axis=1)
        new_mask = res <= inlier_threshold
        if new_mask.sum() < 3 or np.array_equal(new_mask, mask):
            break
        mask = new_mask

    count = int(mask.sum())
    return RansacResult(transform, mask, count, count / n)
