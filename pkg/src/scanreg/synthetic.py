"""Synthetic multi-scan scenes with exact ground truth for validation.

A scene is one global surface point pool; each scan is a crop of that pool
expressed in its own random local frame, optionally with Gaussian point noise.
Because crops share pool points, exact keypoint correspondences are known and
can be emitted as match sets with a controlled outlier rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .errors import InvalidConfig
from .evaluation import GroundTruth
from .features import KeypointSet, MatchSet
from .geometry import RigidTransform, rotation_from_axis_angle


@dataclass
class SceneConfig:
    scene: str = "room"            # room | facade | chain
    n_scans: int = 8
    overlap: float = 0.5           # fraction shared by adjacent crops
    noise_sigma: float = 0.0       # per-coordinate Gaussian noise, meters
    outlier_rate: float = 0.0      # fraction of corrupted match pairs
    seed: int = 0
    points_per_scan: int = 4000
    keypoints_per_scan: int = 400
    max_matches_per_pair: int = 400
    min_matches_per_pair: int = 10
    n_groups: int = 1              # disjoint sub-scenes, zero mutual overlap
    group_spacing: float = 100.0

    def validate(self) -> None:
        if self.scene not in ("room", "facade", "chain"):
            raise InvalidConfig(f"unknown scene type: {self.scene}")
        if self.n_scans < 2:
            raise InvalidConfig("need at least two scans")
        if not 0.0 <= self.overlap < 1.0:
            raise InvalidConfig("overlap must lie in [0, 1)")
        if self.noise_sigma < 0 or not 0.0 <= self.outlier_rate < 1.0:
            raise InvalidConfig("bad noise or outlier configuration")
        if self.n_groups < 1 or self.n_groups > self.n_scans // 2:
            raise InvalidConfig("each group needs at least two scans")


@dataclass
class SyntheticScene:
    scans: dict[int, PointCloud]
    keypoints: dict[int, KeypointSet]
    matches: dict[tuple[int, int], MatchSet]
    ground_truth: GroundTruth
    # provenance: per scan, global pool index of each keypoint / cloud point
    keypoint_globals: dict[int, np.ndarray]
    crop_globals: dict[int, np.ndarray]
    group_of: dict[int, int]

    def dense_matches(self, max_per_pair: int = 4000):
        """Coordinate-level correspondences over all shared points, emulating
        a detector-free matcher (no repeatable keypoint ids)."""
        from .refine import DenseMatches

        out = []
        ids = sorted(self.scans)
        for a, i in enumerate(ids):
            for j in ids[a + 1:]:
                common, rows_i, rows_j = np.intersect1d(
                    self.crop_globals[i], self.crop_globals[j],
                    return_indices=True)
                if len(common) < 3:
                    continue
                if len(common) > max_per_pair:
                    step = len(common) / max_per_pair
                    pick = np.floor(np.arange(max_per_pair) * step).astype(int)
                    rows_i, rows_j = rows_i[pick], rows_j[pick]
                out.append(DenseMatches((i, j), self.scans[i].points[rows_i],
                                        self.scans[j].points[rows_j]))
        return out


def _box_surface(rng, center, size, n):
    """Uniform samples on the surface of an axis-aligned box, with normals."""
    c = np.asarray(center, dtype=np.float64)
    s = np.asarray(size, dtype=np.float64)
    areas = np.array([s[1] * s[2], s[1] * s[2], s[0] * s[2],
                      s[0] * s[2], s[0] * s[1], s[0] * s[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * 0.5 * s[axis]
        pts[m, others[0]] = u[m, 0] * s[others[0]]
        pts[m, others[1]] = u[m, 1] * s[others[1]]
        nrm[m, axis] = sign
    return pts + c, nrm


def _sphere_surface(rng, center, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v, v


def _surface_pool(rng, scene: str, n_points: int):
    """World-frame surface samples plus normals for one group."""
    pts, nrm = [], []
    if scene == "room":
        extent = np.array([6.0, 5.0, 3.0])
        n_shell = n_points // 2
        p, v = _box_surface(rng, extent / 2, extent, n_shell)
        pts.append(p)
        nrm.append(v)
        n_clutter = n_points - n_shell
        n_obj = 10
        per = n_clutter // n_obj
        for _ in range(n_obj):
            center = rng.uniform([0.8, 0.8, 0.3], extent - [0.8, 0.8, 0.8])
            if rng.random() < 0.5:
                p, v = _box_surface(rng, center, rng.uniform(0.3, 0.9, size=3), per)
            else:
                p, v = _sphere_surface(rng, center, rng.uniform(0.2, 0.5), per)
            pts.append(p)
            nrm.append(v)
    else:
        depth = 1.2 if scene == "facade" else 2.5
        length = 24.0
        n_wall = n_points // 2
        p, v = _box_surface(rng, [length / 2, depth / 2, 1.5],
                            [length, depth, 3.0], n_wall)
        pts.append(p)
        nrm.append(v)
        n_clutter = n_points - n_wall
        n_obj = 16
        per = n_clutter // n_obj
        for _ in range(n_obj):
            center = np.array([rng.uniform(0.5, length - 0.5),
                               rng.uniform(0.2, depth - 0.2),
                               rng.uniform(0.3, 2.5)])
            if rng.random() < 0.5:
                p, v = _box_surface(rng, center, rng.uniform(0.2, 0.8, size=3), per)
            else:
                p, v = _sphere_surface(rng, center, rng.uniform(0.15, 0.45), per)
            pts.append(p)
            nrm.append(v)
    return np.vstack(pts), np.vstack(nrm)


def _crop_indices(scene: str, points: np.ndarray, n_scans: int, overlap: float):
    """Index set per scan: angular sectors for rooms, intervals otherwise."""
    crops = []
    if scene == "room":
        center = points.mean(axis=0)
        az = np.arctan2(points[:, 1] - center[1], points[:, 0] - center[0])
        delta = 2.0 * np.pi / n_scans
        half = delta / (2.0 * max(1e-9, 1.0 - overlap))
        half = min(half, np.pi)
        for i in range(n_scans):
            mid = -np.pi + (i + 0.5) * delta
            diff = np.angle(np.exp(1j * (az - mid)))
            crops.append(np.flatnonzero(np.abs(diff) <= half))
    else:
        x = points[:, 0]
        lo, hi = x.min(), x.max()
        span = hi - lo
        width = span / (1.0 + (n_scans - 1) * (1.0 - overlap))
        step = width * (1.0 - overlap)
        for i in range(n_scans):
            a = lo + i * step
            crops.append(np.flatnonzero((x >= a) & (x <= a + width)))
    return crops


def generate_synthetic_scene(config: SceneConfig) -> SyntheticScene:
    """Build scans, ground-truth poses, and outlier-contaminated matches.

    Fully seeded: the same config yields bitwise-identical output. Geometry,
    poses, noise, and match corruption draw from independent child streams,
    so changing the noise level or outlier rate leaves everything else
    untouched.
    """
    config.validate()
    root = np.random.SeedSequence(config.seed)
    rng_geom, rng_pose, rng_noise, rng_match, rng_kp = (
        np.random.default_rng(s) for s in root.spawn(5))

    scans_per_group = [config.n_scans // config.n_groups] * config.n_groups
    for i in range(config.n_scans % config.n_groups):
        scans_per_group[i] += 1

    scans: dict[int, PointCloud] = {}
    keypoints: dict[int, KeypointSet] = {}
    keypoint_globals: dict[int, np.ndarray] = {}
    crop_globals: dict[int, np.ndarray] = {}
    matches: dict[tuple[int, int], MatchSet] = {}
    poses: dict[int, RigidTransform] = {}
    group_of: dict[int, int] = {}

    sid = 0
    global_base = 0
    for g in range(config.n_groups):
        n_g = scans_per_group[g]
        pool_size = max(2000, n_g * config.points_per_scan // 2)
        pool, normals = _surface_pool(rng_geom, config.scene, pool_size)
        pool = pool + np.array([config.group_spacing * g, 0.0, 0.0])
        crops = _crop_indices(config.scene, pool, n_g, config.overlap)

        density = min(1.0, config.keypoints_per_scan / max(1, config.points_per_scan))
        kp_mask = rng_kp.random(len(pool)) < density

        group_ids = list(range(sid, sid + n_g))
        local_kp_index: dict[int, dict[int, int]] = {}
        for k, scan_id in enumerate(group_ids):
            idx = np.sort(crops[k])
            if len(idx) < 10:
                raise InvalidConfig("a crop came out nearly empty; "
                                    "increase points_per_scan or overlap")
            T = RigidTransform(
                rotation_from_axis_angle(rng_pose.normal(size=3)),
                rng_pose.uniform(-2.0, 2.0, size=3))
            poses[scan_id] = T
            local = T.apply(pool[idx])
            local = local + config.noise_sigma * rng_noise.standard_normal(local.shape)
            local_normals = normals[idx] @ T.rotation.T
            scans[scan_id] = PointCloud(local, local_normals)
            group_of[scan_id] = g

            kp_rows = np.flatnonzero(kp_mask[idx])
            kp_global = idx[kp_rows] + global_base
            keypoints[scan_id] = KeypointSet(local[kp_rows],
                                             np.zeros((len(kp_rows), 0)))
            keypoint_globals[scan_id] = kp_global
            crop_globals[scan_id] = idx + global_base
            local_kp_index[scan_id] = {int(gi): li for li, gi
                                       in enumerate(kp_global)}

        for a_pos, i in enumerate(group_ids):
            for j in group_ids[a_pos + 1:]:
                common = sorted(set(local_kp_index[i]) & set(local_kp_index[j]))
                if len(common) < config.min_matches_per_pair:
                    continue
                if len(common) > config.max_matches_per_pair:
                    pick = rng_match.choice(len(common),
                                            size=config.max_matches_per_pair,
                                            replace=False)
                    common = [common[p] for p in np.sort(pick)]
                pairs = np.array([[local_kp_index[i][gi], local_kp_index[j][gi]]
                                  for gi in common], dtype=np.int64)
                pairs = _inject_outliers(pairs, config.outlier_rate, rng_match,
                                         len(keypoints[i]), len(keypoints[j]),
                                         keypoint_globals[i], keypoint_globals[j])
                matches[(i, j)] = MatchSet((i, j), pairs)
        sid += n_g
        global_base += len(pool)

    return SyntheticScene(scans, keypoints, matches, GroundTruth(poses),
                          keypoint_globals, crop_globals, group_of)


def _inject_outliers(pairs: np.ndarray, rate: float, rng, n_kp_i: int,
                     n_kp_j: int, globals_i: np.ndarray,
                     globals_j: np.ndarray) -> np.ndarray:
    if rate <= 0.0 or len(pairs) == 0:
        return pairs
    n_out = int(round(rate * len(pairs)))
    if n_out == 0:
        return pairs
    out = pairs.copy()
    rows = rng.choice(len(pairs), size=n_out, replace=False)
    existing = {tuple(p) for p in out.tolist()}
    for r in rows:
        existing.discard(tuple(out[r]))
        for _ in range(200):
            b = int(rng.integers(n_kp_j))
            cand = (int(out[r, 0]), b)
            # a genuine outlier links different physical points and is unique
            if globals_j[b] != globals_i[out[r, 0]] and cand not in existing:
                out[r, 1] = b
                existing.add(cand)
                break
        else:
            existing.add(tuple(out[r]))
    return out
