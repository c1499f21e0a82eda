"""Track refinement for detector-free matchers.

Dense matchers produce correspondences at arbitrary coordinates, so the same
physical spot receives different "keypoints" in different pairs and no
consistent track can form. The cure is two-staged: first snap dense match
endpoints onto per-scan voxel representatives (one stable keypoint id per
cell) and build a coarse registration from those quantized matches; then pull
every track's observations back onto a consistent physical point by voting
over local patch features, and re-run global bundle adjustment on the refined
observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .ba import BAProblem, solve_global
from .cloud import PointCloud, voxel_keys
from .config import PipelineConfig
from .engine import RegistrationModel, run_incremental
from .errors import EmptyNeighborhood
from .features import KeypointSet, MatchSet
from .geometry import RigidTransform
from .graph import build_graph
from .tracks import Observation, Track, TrackStore, aggregate


@dataclass(frozen=True)
class DenseMatches:
    """Coordinate-level correspondences between two scans (no keypoint ids)."""

    edge: tuple[int, int]
    points_i: np.ndarray
    points_j: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        pi = np.asarray(self.points_i, dtype=np.float64).reshape(-1, 3)
        pj = np.asarray(self.points_j, dtype=np.float64).reshape(-1, 3)
        if len(pi) != len(pj):
            raise ValueError("dense match endpoint counts differ")
        object.__setattr__(self, "points_i", pi)
        object.__setattr__(self, "points_j", pj)


@dataclass
class QuantizedMatches:
    keypoints: dict[int, KeypointSet]
    matches: dict[tuple[int, int], MatchSet]


def quantize_matches(dense: list[DenseMatches], cell: float) -> QuantizedMatches:
    """Snap dense match endpoints to per-scan voxel representatives.

    Every endpoint falling into the same scan-local voxel maps to the same
    keypoint id; the representative position is the centroid of all endpoints
    seen in that cell across all pairs, so the operation is idempotent at a
    fixed cell size. Duplicate snapped pairs are deduplicated.
    """
    if cell <= 0:
        raise ValueError("cell size must be positive")

    per_scan_coords: dict[int, list[np.ndarray]] = {}
    for dm in sorted(dense, key=lambda d: d.edge):
        i, j = dm.edge
        per_scan_coords.setdefault(i, []).append(dm.points_i)
        per_scan_coords.setdefault(j, []).append(dm.points_j)

    keypoints: dict[int, KeypointSet] = {}
    cell_id: dict[int, dict[tuple, int]] = {}
    for sid in sorted(per_scan_coords):
        coords = np.vstack(per_scan_coords[sid])
        keys = voxel_keys(coords, cell)
        uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                          return_counts=True)
        reps = np.zeros((len(uniq), 3))
        np.add.at(reps, inverse, coords)
        reps /= counts[:, None]
        keypoints[sid] = KeypointSet(reps, np.zeros((len(uniq), 0)))
        cell_id[sid] = {tuple(k): idx for idx, k in enumerate(uniq)}

    matches: dict[tuple[int, int], MatchSet] = {}
    for dm in sorted(dense, key=lambda d: d.edge):
        i, j = dm.edge
        a = [cell_id[i][tuple(k)] for k in voxel_keys(dm.points_i, cell)]
        b = [cell_id[j][tuple(k)] for k in voxel_keys(dm.points_j, cell)]
        pairs = sorted(set(zip(a, b)))
        key = (i, j) if i < j else (j, i)
        if i > j:
            pairs = sorted((y, x) for x, y in pairs)
        merged = pairs
        if key in matches:
            merged = sorted(set(map(tuple, matches[key].pairs.tolist())) | set(pairs))
        matches[key] = MatchSet(key, np.array(merged, dtype=np.int64).reshape(-1, 2))
    return QuantizedMatches(keypoints, matches)


def build_coarse_model(scans: dict[int, PointCloud], quantized: QuantizedMatches,
                       config: PipelineConfig | None = None) -> list[RegistrationModel]:
    """Incremental registration over quantized keypoints and matches."""
    cfg = config or PipelineConfig()
    graph = build_graph(scans, cfg, keypoints=quantized.keypoints,
                        matches=quantized.matches)
    return run_incremental(graph, cfg)


@dataclass
class Patch:
    """k points around a center with one feature vector per point.

    When the neighborhood holds fewer than k points the arrays are padded with
    copies of the nearest point; ``n_real`` is the unpadded prefix length.
    """

    center: np.ndarray
    points: np.ndarray    # (k, 3)
    features: np.ndarray  # (k, d)
    padded: bool = False
    n_real: int = 0

    def real_points(self) -> np.ndarray:
        return self.points[:self.n_real]

    def real_features(self) -> np.ndarray:
        return self.features[:self.n_real]


def covariance_shape_features(points: np.ndarray, center: np.ndarray,
                              neighbors: int = 8) -> np.ndarray:
    """Rotation- and normal-sign-invariant per-point features within a patch.

    Every feature depends only on the point's own local neighborhood, never on
    the patch frame: when two patches from different scans sample the same
    surface points, corresponding interior points get identical features. Per
    point: neighborhood eigenvalue shape (linearity, planarity, sphericity),
    mean and spread of neighbor spacing, and offset from the neighborhood
    centroid. The spacing pattern of a sampled surface acts as a local
    fingerprint, which is what makes cross-patch voting land on one physical
    point.
    """
    pts = np.asarray(points, dtype=np.float64)
    k = len(pts)
    m = min(neighbors + 1, k)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=m)
    if m == 1:
        dist, idx = dist[:, None], idx[:, None]
    nbrs = pts[idx]
    local_centroid = nbrs.mean(axis=1)
    local = nbrs - local_centroid[:, None, :]
    lcov = np.einsum("nki,nkj->nij", local, local) / m
    evals = np.linalg.eigvalsh(lcov)
    lam = np.maximum(evals[:, ::-1], 0.0)
    lam1 = np.maximum(lam[:, 0], 1e-18)
    linearity = (lam[:, 0] - lam[:, 1]) / lam1
    planarity = (lam[:, 1] - lam[:, 2]) / lam1
    sphericity = lam[:, 2] / lam1
    if m > 1:
        spacing = dist[:, 1:].mean(axis=1)
        spread = dist[:, 1:].std(axis=1)
    else:
        spacing = np.zeros(k)
        spread = np.zeros(k)
    asym = np.linalg.norm(pts - local_centroid, axis=1)

    return np.column_stack([linearity, planarity, sphericity,
                            spacing, spread, asym])


def extract_patch(cloud: PointCloud, center: np.ndarray, k: int, radius: float,
                  feature_fn=covariance_shape_features,
                  tree: cKDTree | None = None) -> Patch:
    """k nearest cloud points within the radius, padded by duplicating the
    nearest point when the neighborhood is sparse."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    tree = tree or cKDTree(cloud.points)
    dist, idx = tree.query(center, k=min(k, len(cloud.points)))
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    keep = dist <= radius
    if not keep.any():
        raise EmptyNeighborhood("no cloud point within the patch radius")
    idx = idx[keep]
    pts = cloud.points[idx]
    feats = feature_fn(pts, center)
    n_real = len(pts)
    padded = n_real < k
    if padded:
        n_pad = k - n_real
        pts = np.vstack([pts, np.repeat(pts[:1], n_pad, axis=0)])
        feats = np.vstack([feats, np.repeat(feats[:1], n_pad, axis=0)])
    return Patch(center, pts, feats, padded, n_real)


@dataclass
class RefinedTrack:
    track_id: int
    landmark: np.ndarray
    observations: list[Observation]
    degenerate: bool = False


def _normalize_rows(f: np.ndarray) -> np.ndarray | None:
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    out = np.where(norms > 1e-12, f / np.maximum(norms, 1e-300), 0.0)
    if np.ptp(out, axis=0).max() < 1e-12:
        return None  # every point looks identical: no information to vote on
    return out


def refine_track(track: Track, track_id: int, patches: list[Patch],
                 poses: dict[int, RigidTransform], seed: int = 0,
                 feature_neighbors: int = 3,
                 spatial_neighbors: int = 3) -> RefinedTrack:
    """Vote a consistent physical point out of the track's patches.

    A seeded RNG picks one reference patch. Every reference point is scored by
    the sum, over the other patches, of its top cosine similarities there; the
    winner (ties broken toward the patch center) anchors the track, and each
    patch contributes its best match to the winner, smoothed by averaging with
    its nearest in-patch spatial neighbors. Degenerate feature sets keep the
    original keypoints and set the degenerate flag.
    """
    if len(patches) != len(track.observations) or len(patches) < 2:
        raise ValueError("need one patch per observation and at least two")

    feats = [_normalize_rows(p.real_features()) for p in patches]
    if any(f is None for f in feats):
        return RefinedTrack(track_id, track.landmark,
                            list(track.observations), degenerate=True)

    rng = np.random.default_rng(seed)
    r = int(rng.integers(len(patches)))
    others = [i for i in range(len(patches)) if i != r]

    f_r = feats[r]
    scores = np.zeros(len(f_r))
    for i in others:
        sims = f_r @ feats[i].T
        m = min(feature_neighbors, sims.shape[1])
        top = np.sort(sims, axis=1)[:, -m:]
        scores += top.sum(axis=1)

    center_dist = np.linalg.norm(patches[r].real_points() - patches[r].center,
                                 axis=1)
    # prefer interior anchors: points near the patch boundary have truncated
    # neighborhoods that differ between patches and vote unreliably
    interior = center_dist <= np.quantile(center_dist, 0.6)
    candidates = np.flatnonzero(interior)
    if len(candidates) == 0:
        candidates = np.arange(len(scores))
    winner = min(candidates,
                 key=lambda u: (-scores[u], center_dist[u], u))

    def smoothed(patch: Patch, index: int) -> np.ndarray:
        pts = patch.real_points()
        d = np.linalg.norm(pts - pts[index], axis=1)
        near = np.argsort(d, kind="stable")[:spatial_neighbors + 1]
        return pts[near].mean(axis=0)

    refined_pts = [None] * len(patches)
    refined_pts[r] = smoothed(patches[r], winner)
    anchor = f_r[winner]
    for i in others:
        sims = feats[i] @ anchor
        best = min(range(len(sims)), key=lambda v: (-sims[v], v))
        refined_pts[i] = smoothed(patches[i], best)

    # consistency guard: a vote that scatters worse than the original
    # observations found no usable correspondence, so keep the originals
    pose_list = [poses[o.scan_id] for o in track.observations]
    if _world_spread(refined_pts, pose_list) > _world_spread(
            [o.position for o in track.observations], pose_list) + 1e-12:
        return RefinedTrack(track_id, track.landmark,
                            list(track.observations), degenerate=True)

    observations = [Observation(o.scan_id, o.keypoint_index, p)
                    for o, p in zip(track.observations, refined_pts)]
    q, _ = aggregate(np.stack(refined_pts),
                     [poses[o.scan_id] for o in observations])
    return RefinedTrack(track_id, q, observations)


def _world_spread(positions, pose_list) -> float:
    world = np.stack([T.rotation.T @ (p - T.translation)
                      for p, T in zip(positions, pose_list)])
    return float(np.linalg.norm(world - world.mean(axis=0), axis=1).max())


def rms_track_spread(store: TrackStore, poses: dict[int, RigidTransform]) -> float:
    """RMS world-frame scatter of observations around their landmarks."""
    sq, n = 0.0, 0
    for tid in store.active_ids():
        track = store.tracks[tid]
        world = np.stack([poses[o.scan_id].inverse().apply(o.position)
                          for o in track.observations])
        mean = world.mean(axis=0)
        sq += float(((world - mean) ** 2).sum())
        n += len(world)
    return float(np.sqrt(sq / n)) if n else 0.0


def refine_model(model: RegistrationModel, scans: dict[int, PointCloud],
                 config: PipelineConfig | None = None):
    """Refine every active track, then jointly re-optimize poses and landmarks.

    Returns (refined RegistrationModel, report dict). Tracks whose patches
    cannot be extracted, or whose features carry no information, keep their
    original observations.
    """
    cfg = config or PipelineConfig()
    trees = {sid: cKDTree(scans[sid].points) for sid in model.poses}

    store = TrackStore()
    store.next_id = model.tracks.next_id
    degenerate = 0
    for tid in sorted(model.tracks.active_ids()):
        track = model.tracks.tracks[tid]
        try:
            patches = [extract_patch(scans[o.scan_id], o.position,
                                     cfg.patch_size, cfg.patch_radius,
                                     tree=trees[o.scan_id])
                       for o in track.observations]
        except EmptyNeighborhood:
            degenerate += 1
            refined = RefinedTrack(tid, track.landmark,
                                   list(track.observations), degenerate=True)
        else:
            track_seed = int(np.random.SeedSequence(
                (cfg.seed, tid)).generate_state(1)[0])
            refined = refine_track(track, tid, patches, model.poses,
                                   seed=track_seed,
                                   feature_neighbors=cfg.refine_feature_neighbors,
                                   spatial_neighbors=cfg.refine_spatial_neighbors)
            degenerate += int(refined.degenerate)
        store.tracks[tid] = Track(refined.landmark, refined.observations)
        for o in refined.observations:
            store.index[o.key] = tid

    spread_before = rms_track_spread(model.tracks, model.poses)

    refined_model = RegistrationModel(model.component_id, dict(model.poses),
                                      store, list(model.order))
    problem = BAProblem.from_tracks(refined_model.poses, store,
                                    refined_model.anchor, loss=cfg.ba_loss,
                                    huber_scale=cfg.ba_huber_scale)
    report, poses, landmarks = solve_global(problem, cfg.global_ba_max_iterations)
    refined_model.poses.update(poses)
    for tid, q in landmarks.items():
        store.tracks[tid].landmark = q

    spread_after = rms_track_spread(store, refined_model.poses)
    info = {
        "initial_energy": report.initial_energy,
        "final_energy": report.final_energy,
        "iterations": report.iterations,
        "degenerate_tracks": degenerate,
        "spread_before": spread_before,
        "spread_after": spread_after,
        "pose_deltas": {
            sid: float(np.linalg.norm(refined_model.poses[sid].translation
                                      - model.poses[sid].translation))
            for sid in model.poses},
    }
    return refined_model, info
