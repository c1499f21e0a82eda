"""Incremental registration: initialization, next-scan selection, clustered
next-scan registration, track maintenance, BA scheduling, and the spanning
tree baseline.

The engine walks the verified scan graph. It seeds a component from a
well-connected central edge, then repeatedly picks the unregistered scan that
sees the most landmarks, solves its pose from keypoint-to-landmark matches
contributed per neighbor (clustering the per-neighbor candidates to reject
corrupted edges), updates tracks, and interleaves local and global bundle
adjustment. When no scan qualifies the component is closed and registration
restarts among the remaining scans, so disconnected scenes come out as
separate models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import BAProblem, solve_global, solve_local
from .config import PipelineConfig
from .errors import NoCandidates, NoConsensus
from .geometry import (CorrespondenceSet, RigidTransform, compose,
                       ransac_rigid, rotation_distance)
from .graph import ScanGraph, edge_seed
from .tracks import Observation, TrackStore


@dataclass
class RegistrationModel:
    """Registered poses (world -> scan) and tracks of one connected component."""

    component_id: int
    poses: dict[int, RigidTransform] = field(default_factory=dict)
    tracks: TrackStore = field(default_factory=TrackStore)
    order: list[int] = field(default_factory=list)
    stats: dict = field(default_factory=lambda: {
        "local_ba": 0, "global_ba": 0, "failed_scans": [], "ba_energy": []})

    @property
    def anchor(self) -> int:
        return self.order[0]

    def scan_ids(self) -> list[int]:
        return sorted(self.poses)


@dataclass
class CandidatePose:
    """Pose hypothesis for the next scan from one registered neighbor."""

    transform: RigidTransform
    source_neighbor: int
    keypoint_indices: np.ndarray
    track_ids: np.ndarray
    points: np.ndarray      # (M, 3) next-scan keypoint positions
    landmarks: np.ndarray   # (M, 3) matched world landmarks
    inlier_count: int
    inlier_ratio: float

    def __post_init__(self):
        if len(self.keypoint_indices) == 0:
            raise ValueError("candidate must carry supporting matches")


def closeness_centrality(graph: ScanGraph) -> dict[int, float]:
    """(reachable - 1) / sum of hop distances, per node, within its component.
    Isolated nodes score 0."""
    out = {}
    for start in graph.nodes:
        dist = {start: 0}
        frontier = [start]
        while frontier:
            nxt = []
            for v in frontier:
                for w in graph.neighbors(v):
                    if w not in dist:
                        dist[w] = dist[v] + 1
                        nxt.append(w)
            frontier = nxt
        reach = len(dist) - 1
        total = sum(dist.values())
        out[start] = reach / total if total > 0 else 0.0
    return out


def select_initial_pair(graph: ScanGraph, min_matches: int,
                        exclude: set[int] | None = None) -> tuple[int, int] | None:
    """First scan in descending centrality order whose best edge carries more
    than ``min_matches`` verified inliers; returns that edge or None.

    Ties in centrality break toward the smaller scan id, ties in inlier count
    toward the smaller neighbor id.
    """
    exclude = exclude or set()
    centrality = closeness_centrality(graph)
    for sid in sorted(graph.nodes, key=lambda s: (-centrality[s], s)):
        if sid in exclude:
            continue
        best = None
        for nbr in graph.neighbors(sid):
            if nbr in exclude:
                continue
            count = graph.edge(sid, nbr).inlier_count
            if best is None or count > best[0]:
                best = (count, nbr)
        if best is not None and best[0] > min_matches:
            return (sid, best[1])
    return None


def initialize(model: RegistrationModel, graph: ScanGraph,
               edge: tuple[int, int], config: PipelineConfig) -> None:
    """Anchor scan i at identity, place scan j by the edge transform, and
    create the initial tracks from the edge's inlier matches."""
    i, j = edge
    model.poses[i] = RigidTransform.identity()
    model.poses[j] = graph.transform(i, j)
    model.order.extend([i, j])

    data = graph.edge(i, j)
    ms = graph.matches(i, j)
    pairs = [((i, int(a)), (j, int(b)))
             for (a, b), keep in zip(ms.pairs, data.inlier_mask) if keep]
    positions = {i: graph.nodes[i].positions, j: graph.nodes[j].positions}
    model.tracks.create_tracks(pairs, positions, model.poses,
                               config.track_residual, seed=config.seed)


def _visible_refs(model: RegistrationModel, graph: ScanGraph, candidate: int):
    refs = []
    for nbr in graph.neighbors(candidate):
        if nbr not in model.poses:
            continue
        ms = graph.matches(candidate, nbr)
        for _, kp_nbr in ms.pairs:
            refs.append((nbr, int(kp_nbr)))
    return refs


def select_next_scan(model: RegistrationModel, graph: ScanGraph,
                     min_visible: int, registered: set[int],
                     failed: set[int]) -> int | None:
    """Unregistered scan adjacent to the model with the most visible tracks,
    provided the count exceeds ``min_visible``. Ties go to the smaller id."""
    best = None
    for sid in sorted(graph.nodes):
        if sid in registered or sid in failed:
            continue
        if not any(n in model.poses for n in graph.neighbors(sid)):
            continue
        count = model.tracks.visible_track_count(_visible_refs(model, graph, sid))
        if count > min_visible and (best is None or count > best[0]):
            best = (count, sid)
    return None if best is None else best[1]


def candidate_poses(model: RegistrationModel, graph: ScanGraph, scan: int,
                    config: PipelineConfig) -> list[CandidatePose]:
    """One pose hypothesis per registered neighbor, each solved robustly from
    that neighbor's keypoint-to-landmark matches. Neighbors whose matches
    reach no active track, or that yield no consensus, contribute nothing."""
    out = []
    kp_scan = graph.nodes[scan].positions
    for nbr in sorted(n for n in graph.neighbors(scan) if n in model.poses):
        ms = graph.matches(scan, nbr)
        kp_idx, tids = [], []
        for kp_s, kp_n in ms.pairs:
            tid = model.tracks.track_of(nbr, int(kp_n))
            if tid is not None:
                kp_idx.append(int(kp_s))
                tids.append(tid)
        if len(kp_idx) < 3:
            continue
        points = kp_scan[kp_idx]
        landmarks = np.stack([model.tracks.tracks[t].landmark for t in tids])
        try:
            result = ransac_rigid(CorrespondenceSet(landmarks, points),
                                  iterations=config.ransac_iterations,
                                  inlier_threshold=config.ransac_threshold,
                                  seed=edge_seed(config.seed, scan, nbr))
        except NoConsensus:
            continue
        mask = result.inlier_mask
        out.append(CandidatePose(result.transform, nbr,
                                 np.array(kp_idx, dtype=np.int64)[mask],
                                 np.array(tids, dtype=np.int64)[mask],
                                 points[mask], landmarks[mask],
                                 result.inlier_count, result.inlier_ratio))
    if not out:
        raise NoCandidates(f"no registered neighbor yields a pose for scan {scan}")
    return out


def cluster_and_register(candidates: list[CandidatePose],
                         rotation_eps: float, translation_eps: float,
                         config: PipelineConfig,
                         seed: int = 0) -> tuple[RigidTransform, np.ndarray]:
    """Single-linkage clustering of candidate poses; the largest cluster's
    supporting matches are pooled and re-solved in one robust estimation.

    Candidates link when both the rotation geodesic distance and the
    translation distance fall within the epsilons. Cluster-size ties break
    toward more pooled supporting matches, then toward the earliest member.
    Returns the final pose and the pooled inlier mask.
    """
    n = len(candidates)
    if n == 0:
        raise NoConsensus("no candidates to cluster")
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a in range(n):
        for b in range(a + 1, n):
            if (rotation_distance(candidates[a].transform, candidates[b].transform)
                    <= rotation_eps
                    and np.linalg.norm(candidates[a].transform.translation
                                       - candidates[b].transform.translation)
                    <= translation_eps):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)

    clusters: dict[int, list[int]] = {}
    for a in range(n):
        clusters.setdefault(find(a), []).append(a)

    def cluster_rank(members):
        total = sum(len(candidates[m].keypoint_indices) for m in members)
        return (len(members), total, -min(members))

    members = max(clusters.values(), key=cluster_rank)

    seen = set()
    points, landmarks = [], []
    for m in sorted(members):
        c = candidates[m]
        for k in range(len(c.keypoint_indices)):
            key = (int(c.keypoint_indices[k]), int(c.track_ids[k]))
            if key in seen:
                continue
            seen.add(key)
            points.append(c.points[k])
            landmarks.append(c.landmarks[k])
    corr = CorrespondenceSet(np.array(landmarks), np.array(points))
    result = ransac_rigid(corr, iterations=config.ransac_iterations,
                          inlier_threshold=config.ransac_threshold, seed=seed)
    return result.transform, result.inlier_mask


def _update_tracks(model: RegistrationModel, graph: ScanGraph, scan: int,
                   config: PipelineConfig) -> None:
    """Continue tracks with the new scan's matched keypoints, then create new
    tracks from its remaining matches to registered scans."""
    kp_scan = graph.nodes[scan].positions
    continuations = []
    creations = []
    for nbr in sorted(n for n in graph.neighbors(scan) if n in model.poses):
        ms = graph.matches(scan, nbr)
        data = graph.edge(scan, nbr)
        for (kp_s, kp_n), keep in zip(ms.pairs, data.inlier_mask):
            if not keep:
                continue
            kp_s, kp_n = int(kp_s), int(kp_n)
            tid = model.tracks.track_of(nbr, kp_n)
            if tid is not None:
                continuations.append(
                    (tid, Observation(scan, kp_s, kp_scan[kp_s])))
            else:
                creations.append(((scan, kp_s), (nbr, kp_n)))
    model.tracks.continue_tracks(continuations, model.poses,
                                 config.track_residual, seed=config.seed)
    positions = {sid: graph.nodes[sid].positions for sid in model.poses}
    model.tracks.create_tracks(creations, positions, model.poses,
                               config.track_residual, seed=config.seed)


def _run_ba(model: RegistrationModel, config: PipelineConfig,
            mode: str, new_scan: int | None, graph: ScanGraph) -> None:
    problem = BAProblem.from_tracks(model.poses, model.tracks, model.anchor,
                                    loss=config.ba_loss,
                                    huber_scale=config.ba_huber_scale)
    if mode == "local":
        free = {new_scan} | {n for n in graph.neighbors(new_scan)
                             if n in model.poses}
        free.discard(model.anchor)
        report, poses = solve_local(problem, sorted(free),
                                    config.local_ba_max_iterations)
        model.poses.update(poses)
        model.tracks.reaggregate(model.poses)
        model.stats["local_ba"] += 1
    else:
        report, poses, landmarks = solve_global(problem,
                                                config.global_ba_max_iterations)
        model.poses.update(poses)
        for tid, q in landmarks.items():
            model.tracks.tracks[tid].landmark = q
        model.stats["global_ba"] += 1
    model.stats["ba_energy"].append(
        (mode, report.initial_energy, report.final_energy))


def run_incremental(graph: ScanGraph,
                    config: PipelineConfig | None = None) -> list[RegistrationModel]:
    """Register every reachable scan, one model per reconstructed component.

    Per component: seed from the best central edge, then loop next-scan
    selection, clustered registration, track continue/create/filter, local BA
    after every registration, and global BA on the configured schedule plus
    once at the end. Scans that never register are simply absent from all
    returned models.
    """
    cfg = config or PipelineConfig()
    registered: set[int] = set()
    models: list[RegistrationModel] = []

    while True:
        remaining = set(graph.nodes) - registered
        if len(remaining) < 2:
            break
        sub = graph.subgraph(remaining)
        pair = select_initial_pair(sub, cfg.min_init_matches)
        if pair is None:
            break

        model = RegistrationModel(component_id=len(models))
        initialize(model, graph, pair, cfg)
        registered.update(pair)
        failed: set[int] = set()
        since_global = 0
        last_global_size = len(model.order)

        while True:
            nxt = select_next_scan(model, graph, cfg.min_visible_tracks,
                                   registered, failed)
            if nxt is None:
                break
            try:
                candidates = candidate_poses(model, graph, nxt, cfg)
                pose, _ = cluster_and_register(
                    candidates, np.deg2rad(cfg.cluster_rotation_eps_deg),
                    cfg.cluster_translation_eps, cfg,
                    seed=edge_seed(cfg.seed + 1, nxt, nxt))
            except (NoCandidates, NoConsensus):
                failed.add(nxt)
                model.stats["failed_scans"].append(nxt)
                continue
            model.poses[nxt] = pose
            model.order.append(nxt)
            registered.add(nxt)
            _update_tracks(model, graph, nxt, cfg)
            model.tracks.filter_tracks(model.poses, cfg.track_residual,
                                       cfg.min_track_length)
            _run_ba(model, cfg, "local", nxt, graph)
            since_global += 1
            if (since_global >= cfg.global_ba_interval
                    or len(model.order) >= last_global_size * (1.0 + cfg.global_ba_growth)):
                _run_ba(model, cfg, "global", None, graph)
                model.tracks.filter_tracks(model.poses, cfg.track_residual,
                                           cfg.min_track_length)
                since_global = 0
                last_global_size = len(model.order)

        _run_ba(model, cfg, "global", None, graph)
        model.tracks.filter_tracks(model.poses, cfg.track_residual,
                                   cfg.min_track_length)
        models.append(model)
    return models


def mst_baseline(graph: ScanGraph) -> dict[int, RigidTransform]:
    """Chain relative transforms along a maximum spanning tree.

    Per connected component: the spanning tree maximizes total edge inlier
    count, the root is the most central node (pose = identity), and every
    other pose is the composition of edge transforms along its tree path.
    """
    centrality = closeness_centrality(graph)
    poses: dict[int, RigidTransform] = {}
    for comp in graph.connected_components():
        if len(comp) == 1:
            poses[comp[0]] = RigidTransform.identity()
            continue
        comp_set = set(comp)
        root = max(comp, key=lambda s: (centrality[s], -s))
        in_tree = {root}
        poses[root] = RigidTransform.identity()
        # Prim's algorithm on -inlier_count, deterministic tie-breaks
        while len(in_tree) < len(comp):
            best = None
            for v in sorted(in_tree):
                for w in graph.neighbors(v):
                    if w in in_tree or w not in comp_set:
                        continue
                    count = graph.edge(v, w).inlier_count
                    key = (count, -v, -w)
                    if best is None or key > best[0]:
                        best = (key, v, w)
            if best is None:
                break
            _, v, w = best
            poses[w] = compose(graph.transform(v, w), poses[v])
            in_tree.add(w)
    return poses
