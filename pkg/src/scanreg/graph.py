"""Sparse scan graph: overlap scoring, edge proposal, and geometric verification.

Nodes are scans with their keypoints; an edge survives only when a robustly
estimated relative transform is supported by enough matches. Edges are stored
once per unordered pair in canonical i < j orientation and re-oriented on read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, voxel_downsample
from .config import PipelineConfig
from .errors import BadMatrixShape, EmptyCloud, NoConsensus
from .features import KeypointSet, MatchSet, extract_keypoints, match_features
from .geometry import CorrespondenceSet, RigidTransform, invert, ransac_rigid


def edge_seed(base: int, i: int, j: int) -> int:
    """Stable per-edge RANSAC seed so edge results do not depend on visit order."""
    return int(np.random.SeedSequence((base, min(i, j), max(i, j))).generate_state(1)[0])


@dataclass
class EdgeData:
    """Verified relative geometry for a scan pair, stored with i < j."""

    matches: MatchSet
    transform: RigidTransform          # maps scan-i coords into scan-j coords
    inlier_mask: np.ndarray = field(repr=False)
    inlier_count: int = 0
    inlier_ratio: float = 0.0
    overlap_score: float = 0.0


class ScanGraph:
    """Scans plus verified pairwise edges."""

    def __init__(self):
        self.nodes: dict[int, KeypointSet] = {}
        self.edges: dict[tuple[int, int], EdgeData] = {}
        self.stats: dict = {"proposed": 0, "rejected": 0, "rejections": []}

    def add_node(self, scan_id: int, keypoints: KeypointSet) -> None:
        self.nodes[int(scan_id)] = keypoints

    def add_edge(self, i: int, j: int, data: EdgeData) -> None:
        if i not in self.nodes or j not in self.nodes:
            raise KeyError("edge references unknown scan id")
        if (i, j) != tuple(sorted((i, j))):
            raise ValueError("edges must be added in canonical i < j orientation")
        self.edges[(i, j)] = data

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def edge(self, i: int, j: int) -> EdgeData:
        return self.edges[(min(i, j), max(i, j))]

    def transform(self, i: int, j: int) -> RigidTransform:
        """Relative transform mapping scan-i coordinates into scan-j coordinates."""
        data = self.edges[(min(i, j), max(i, j))]
        return data.transform if i < j else invert(data.transform)

    def matches(self, i: int, j: int) -> MatchSet:
        """Match pairs oriented so the first column indexes scan i."""
        data = self.edges[(min(i, j), max(i, j))]
        return data.matches if i < j else data.matches.flipped()

    def neighbors(self, i: int) -> list[int]:
        out = [b if a == i else a for (a, b) in self.edges if i in (a, b)]
        return sorted(out)

    def connected_components(self) -> list[list[int]]:
        """Sorted node lists, ordered by smallest member."""
        seen = set()
        components = []
        for start in sorted(self.nodes):
            if start in seen:
                continue
            stack, comp = [start], []
            seen.add(start)
            while stack:
                v = stack.pop()
                comp.append(v)
                for w in self.neighbors(v):
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
            components.append(sorted(comp))
        return components

    def subgraph(self, keep: set[int]) -> "ScanGraph":
        sub = ScanGraph()
        for sid in sorted(keep):
            if sid in self.nodes:
                sub.add_node(sid, self.nodes[sid])
        for (i, j), data in self.edges.items():
            if i in keep and j in keep:
                sub.edges[(i, j)] = data
        return sub


def overlap_scores(scans: dict[int, PointCloud] | list[PointCloud],
                   config: PipelineConfig | None = None,
                   precomputed: np.ndarray | None = None) -> np.ndarray:
    """Symmetric overlap score matrix in [0, 1] over the scan list order.

    With ``precomputed`` given, validates and returns it verbatim. The builtin
    path voxel-downsamples each scan, matches coarse descriptors on a
    subsample, estimates a coarse alignment with RANSAC, and scores a pair by
    (inlier ratio) x (fraction of downsampled points with a neighbor within
    the overlap radius after alignment). Unmatchable pairs score 0.
    """
    clouds = list(scans.values()) if isinstance(scans, dict) else list(scans)
    n = len(clouds)
    if n < 2:
        raise ValueError("need at least two scans")
    if precomputed is not None:
        m = np.asarray(precomputed, dtype=np.float64)
        if m.shape != (n, n):
            raise BadMatrixShape(f"overlap matrix must be {n}x{n}, got {m.shape}")
        if np.abs(m - m.T).max() > 1e-9 or np.abs(np.diag(m)).max() > 1e-9:
            raise BadMatrixShape("overlap matrix must be symmetric with zero diagonal")
        return m.copy()

    cfg = config or PipelineConfig()
    for c in clouds:
        if len(c) == 0:
            raise EmptyCloud("overlap scoring received an empty cloud")

    coarse = []
    for c in clouds:
        kp = extract_keypoints(c, voxel_size=cfg.overlap_voxel,
                               descriptor_radius=3.0 * cfg.overlap_voxel,
                               normal_neighbors=cfg.normal_neighbors)
        down, _, _ = voxel_downsample(c.points, cfg.overlap_voxel)
        coarse.append((kp, down, cKDTree(down)))

    scores = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            scores[i, j] = scores[j, i] = _pair_overlap(
                coarse[i], coarse[j], cfg, edge_seed(cfg.seed, i, j))
    return scores


def _subsample(kp: KeypointSet, limit: int) -> KeypointSet:
    if len(kp) <= limit:
        return kp
    step = len(kp) / limit
    idx = np.floor(np.arange(limit) * step).astype(int)
    return KeypointSet(kp.positions[idx], kp.descriptors[idx])


def _pair_overlap(a, b, cfg: PipelineConfig, seed: int) -> float:
    kp_a, down_a, _ = a
    kp_b, down_b, tree_b = b
    sa = _subsample(kp_a, cfg.overlap_sample)
    sb = _subsample(kp_b, cfg.overlap_sample)
    matches = match_features(sa, sb)
    if len(matches) < 3:
        return 0.0
    corr = CorrespondenceSet(sa.positions[matches.pairs[:, 0]],
                             sb.positions[matches.pairs[:, 1]])
    try:
        result = ransac_rigid(corr, iterations=cfg.overlap_iterations,
                              inlier_threshold=cfg.overlap_radius, seed=seed)
    except NoConsensus:
        return 0.0
    aligned = result.transform.apply(down_a)
    d_ab, _ = tree_b.query(aligned, k=1, distance_upper_bound=cfg.overlap_radius)
    frac_ab = float(np.isfinite(d_ab).mean())
    back = invert(result.transform).apply(down_b)
    d_ba, _ = cKDTree(down_a).query(back, k=1, distance_upper_bound=cfg.overlap_radius)
    frac_ba = float(np.isfinite(d_ba).mean())
    # squared consensus ratio suppresses coincidental alignments between
    # unrelated clouds, which otherwise superimpose and fake overlap
    return result.inlier_ratio ** 2 * 0.5 * (frac_ab + frac_ba)


def propose_edges(scores: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Union over nodes of each node's k highest-scoring partners.

    Ties are broken toward the smaller partner index; the union is deduplicated
    and returned sorted. Output is monotone in k.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    edges = set()
    for i in range(n):
        partners = [p for p in range(n) if p != i]
        partners.sort(key=lambda p: (-s[i, p], p))
        for p in partners[:k]:
            edges.add((min(i, p), max(i, p)))
    return sorted(edges)


@dataclass
class VerificationOutcome:
    accepted: bool
    transform: RigidTransform | None
    inlier_mask: np.ndarray | None
    inlier_count: int
    inlier_ratio: float
    reason: str = ""


def geometric_verify(matches: MatchSet, keypoints_i: KeypointSet,
                     keypoints_j: KeypointSet, min_inliers: int,
                     min_inlier_ratio: float, iterations: int,
                     threshold: float, seed: int) -> VerificationOutcome:
    """Robustly fit the i -> j transform over matched keypoints and accept the
    edge only when inlier count and inlier ratio both clear their thresholds.
    Rejection is a normal outcome, reported with the observed stats."""
    if len(matches) < 3:
        return VerificationOutcome(False, None, None, 0, 0.0, "too few matches")
    corr = CorrespondenceSet(keypoints_i.positions[matches.pairs[:, 0]],
                             keypoints_j.positions[matches.pairs[:, 1]])
    try:
        result = ransac_rigid(corr, iterations=iterations,
                              inlier_threshold=threshold, seed=seed)
    except NoConsensus:
        return VerificationOutcome(False, None, None, 0, 0.0, "no consensus")
    ok = result.inlier_count >= min_inliers and result.inlier_ratio >= min_inlier_ratio
    reason = "" if ok else "below inlier thresholds"
    return VerificationOutcome(ok, result.transform, result.inlier_mask,
                               result.inlier_count, result.inlier_ratio, reason)


def build_graph(scans: dict[int, PointCloud],
                config: PipelineConfig | None = None,
                keypoints: dict[int, KeypointSet] | None = None,
                matches: dict[tuple[int, int], MatchSet] | None = None,
                overlap: np.ndarray | None = None) -> ScanGraph:
    """Full graph construction: score overlaps, propose top-k edges per scan,
    match keypoints, and keep only geometrically verified edges.

    ``keypoints``, ``matches`` and ``overlap`` ingest precomputed inputs;
    anything missing is computed with the builtin methods. Scans with no
    surviving edge remain as isolated nodes.
    """
    cfg = config or PipelineConfig()
    ids = sorted(scans)
    if len(ids) < 2:
        raise ValueError("need at least two scans")

    kps: dict[int, KeypointSet] = {}
    for sid in ids:
        if keypoints is not None and sid in keypoints:
            kps[sid] = keypoints[sid]
        else:
            kps[sid] = extract_keypoints(scans[sid], voxel_size=cfg.voxel_size,
                                         descriptor_radius=cfg.descriptor_radius,
                                         normal_neighbors=cfg.normal_neighbors)

    if overlap is None and matches is not None:
        # precomputed matches imply pair availability; score by match count
        overlap = np.zeros((len(ids), len(ids)))
        for (i, j), ms in matches.items():
            a, b = ids.index(i), ids.index(j)
            overlap[a, b] = overlap[b, a] = min(1.0, len(ms) / 1000.0)
    if overlap is None:
        scores = overlap_scores([scans[i] for i in ids], cfg)
    else:
        scores = overlap_scores([scans[i] for i in ids], cfg, precomputed=overlap)

    proposed = propose_edges(scores, cfg.edge_candidates_per_scan)

    graph = ScanGraph()
    for sid in ids:
        graph.add_node(sid, kps[sid])
    graph.stats["proposed"] = len(proposed)

    for (a, b) in proposed:
        i, j = ids[a], ids[b]
        if matches is not None:
            ms = matches.get((i, j))
            if ms is None and (j, i) in matches:
                ms = matches[(j, i)].flipped()
            if ms is None:
                ms = MatchSet((i, j), np.zeros((0, 2), dtype=np.int64))
        else:
            ms = match_features(kps[i], kps[j], edge=(i, j), ratio=cfg.match_ratio)
        outcome = geometric_verify(ms, kps[i], kps[j],
                                   cfg.min_edge_inliers, cfg.min_edge_inlier_ratio,
                                   cfg.ransac_iterations, cfg.ransac_threshold,
                                   edge_seed(cfg.seed, i, j))
        if outcome.accepted:
            graph.add_edge(i, j, EdgeData(ms, outcome.transform, outcome.inlier_mask,
                                          outcome.inlier_count, outcome.inlier_ratio,
                                          float(scores[a, b])))
        else:
            graph.stats["rejected"] += 1
            graph.stats["rejections"].append(
                {"edge": (i, j), "reason": outcome.reason,
                 "inlier_count": outcome.inlier_count,
                 "inlier_ratio": outcome.inlier_ratio})
    return graph
