"""Keypoint extraction, handcrafted descriptors, and descriptor matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, estimate_normals, voxel_downsample
from .errors import DimensionMismatch, EmptyCloud

HISTOGRAM_BINS = 11  # per angle channel; 3 channels -> 33-dim descriptor


@dataclass(frozen=True)
class KeypointSet:
    """Keypoint positions (scan-local) with one fixed-length descriptor each."""

    positions: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        if desc.ndim != 2 or len(desc) != len(pos):
            raise DimensionMismatch("need exactly one descriptor per keypoint")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class MatchSet:
    """Index pairs between the keypoints of two scans (edge i -> j, i != j)."""

    edge: tuple[int, int]
    pairs: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        i, j = self.edge
        if i == j:
            raise ValueError("match edge endpoints must differ")
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) != len(np.unique(pairs, axis=0)):
            raise ValueError("duplicate match pairs")
        scores = self.scores
        if scores is not None:
            scores = np.asarray(scores, dtype=np.float64).reshape(-1)
            if len(scores) != len(pairs):
                raise ValueError("scores must match the number of pairs")
        object.__setattr__(self, "edge", (int(i), int(j)))
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.pairs)

    def flipped(self) -> "MatchSet":
        scores = None if self.scores is None else self.scores
        return MatchSet((self.edge[1], self.edge[0]), self.pairs[:, ::-1], scores)


def angle_histogram_descriptors(positions: np.ndarray, normals: np.ndarray,
                                radius: float) -> np.ndarray:
    """33-bin histogram of normal/offset angles over each point's neighborhood.

    For every neighbor q of keypoint p the three sign-invariant channels are
    |n_p . n_q|, |n_p . d| and |n_q . d| with d the unit offset from p to q.
    Each channel is histogrammed into 11 bins over [0, 1] and the three
    blocks are concatenated and L1-normalized. Rotation invariant and
    invariant to the arbitrary sign of estimated normals.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    desc = np.zeros((n, 3 * HISTOGRAM_BINS))
    tree = cKDTree(pts)
    neighbor_lists = tree.query_ball_point(pts, r=radius)
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    edges[-1] = 1.0 + 1e-9
    for a in range(n):
        nbr = [b for b in neighbor_lists[a] if b != a]
        if not nbr:
            continue
        d = pts[nbr] - pts[a]
        dist = np.linalg.norm(d, axis=1)
        keep = dist > 1e-12
        if not keep.any():
            continue
        d = d[keep] / dist[keep, None]
        nq = normals[nbr][keep]
        np_a = normals[a]
        f = np.stack([
            np.abs(nq @ np_a),
            np.abs(d @ np_a),
            np.abs(np.einsum("ij,ij->i", d, nq)),
        ])
        f = np.clip(f, 0.0, 1.0)
        for c in range(3):
            hist, _ = np.histogram(f[c], bins=edges)
            desc[a, c * HISTOGRAM_BINS:(c + 1) * HISTOGRAM_BINS] = hist
        desc[a] /= desc[a].sum()
    return desc


def extract_keypoints(cloud: PointCloud, voxel_size: float = 0.05,
                      descriptor_radius: float = 0.25,
                      normal_neighbors: int = 16) -> KeypointSet:
    """Voxel-grid keypoints (cell centroids) with angle-histogram descriptors.

    Keypoint order is the lexicographic order of occupied voxel keys, so the
    result is deterministic for a given cloud.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot extract keypoints from an empty cloud")
    centroids, _, inverse = voxel_downsample(cloud.points, voxel_size)
    if cloud.normals is not None:
        normals = np.zeros_like(centroids)
        np.add.at(normals, inverse, cloud.normals)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        degenerate = lengths[:, 0] < 1e-9
        if degenerate.any():
            normals[degenerate] = estimate_normals(centroids, normal_neighbors)[degenerate]
            lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / lengths
    else:
        normals = estimate_normals(centroids, normal_neighbors)
    descriptors = angle_histogram_descriptors(centroids, normals, descriptor_radius)
    return KeypointSet(centroids, descriptors)


def match_features(a: KeypointSet, b: KeypointSet, edge: tuple[int, int] = (0, 1),
                   ratio: float = 1.0) -> MatchSet:
    """Mutual nearest neighbors in descriptor space, optional Lowe ratio test.

    ratio < 1 keeps a match only when its nearest descriptor distance is below
    ratio times the second-nearest. Deterministic; an empty result is allowed.
    """
    if a.descriptors.shape[1] != b.descriptors.shape[1]:
        raise DimensionMismatch("descriptor dimensions differ")
    if len(a) == 0 or len(b) == 0:
        return MatchSet(edge, np.zeros((0, 2), dtype=np.int64), None)

    tree_b = cKDTree(b.descriptors)
    tree_a = cKDTree(a.descriptors)
    k = min(2, len(b))
    dist_ab, idx_ab = tree_b.query(a.descriptors, k=k)
    if k == 1:
        dist_ab, idx_ab = dist_ab[:, None], idx_ab[:, None]
    _, idx_ba = tree_a.query(b.descriptors, k=1)

    pairs = []
    scores = []
    for ia in range(len(a)):
        ib = int(idx_ab[ia, 0])
        if int(idx_ba[ib]) != ia:
            continue
        d1 = dist_ab[ia, 0]
        if ratio < 1.0 and k == 2:
            d2 = dist_ab[ia, 1]
            if d2 > 0 and d1 >= ratio * d2:
                continue
        pairs.append((ia, ib))
        scores.append(1.0 / (1.0 + d1))
    if not pairs:
        return MatchSet(edge, np.zeros((0, 2), dtype=np.int64), None)
    return MatchSet(edge, np.array(pairs, dtype=np.int64), np.array(scores))
