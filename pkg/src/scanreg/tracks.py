"""Tracks: landmarks aggregated from keypoint observations across scans.

A track stores one world-frame landmark together with the scan-local keypoint
observations that generate it. Aggregation solves the stacked linear system
p_i = R_i q + t_i for q in least squares; because each R_i is orthonormal the
solution is the closed form q = mean_i R_i^T (p_i - t_i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConsensus
from .geometry import RigidTransform


@dataclass(frozen=True)
class Observation:
    """One keypoint of one scan, with its scan-local position cached."""

    scan_id: int
    keypoint_index: int
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64).reshape(3))

    @property
    def key(self) -> tuple[int, int]:
        return (self.scan_id, self.keypoint_index)


@dataclass
class Track:
    landmark: np.ndarray
    observations: list[Observation]
    status: str = "active"  # "active" | "filtered"

    def __len__(self) -> int:
        return len(self.observations)

    def scan_ids(self) -> set[int]:
        return {o.scan_id for o in self.observations}


def aggregate(positions: np.ndarray, poses: list[RigidTransform]):
    """Least-squares landmark for observations (p_i, (R_i, t_i)).

    Returns (q, residuals) where residuals[i] = ||p_i - (R_i q + t_i)||.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pos) == 0:
        raise ValueError("need at least one observation")
    world = np.stack([T.rotation.T @ (p - T.translation)
                      for p, T in zip(pos, poses)])
    q = world.mean(axis=0)
    residuals = np.linalg.norm(world - q, axis=1)
    return q, residuals


def aggregation_ransac(positions: np.ndarray, poses: list[RigidTransform],
                       threshold: float, seed: int = 0):
    """Robust aggregation: each single observation proposes a landmark, the
    proposal agreeing with the most observations wins, and the landmark is
    re-aggregated over that consensus set.

    A single observation fully determines a candidate q = R^T (p - t), so all
    candidates are evaluated exhaustively; the seed is accepted for interface
    stability but no random sampling is required. Raises NoConsensus when no
    candidate reaches 2 inliers.

    Returns (inlier_mask, landmark).
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    if n < 2:
        raise NoConsensus("need at least two observations")
    world = np.stack([T.rotation.T @ (p - T.translation)
                      for p, T in zip(pos, poses)])
    dist = np.linalg.norm(world[:, None, :] - world[None, :, :], axis=2)
    inliers = dist <= threshold
    counts = inliers.sum(axis=1)
    best = counts.max()
    if best < 2:
        raise NoConsensus("no landmark candidate reached 2 inliers")
    tied = np.flatnonzero(counts == best)
    means = np.array([dist[i, inliers[i]].mean() for i in tied])
    pick = int(tied[np.argmin(means)])
    mask = inliers[pick]
    q = world[mask].mean(axis=0)
    return mask, q


@dataclass
class TrackStore:
    """All tracks plus an inverted (scan, keypoint) -> track id index.

    The index covers active tracks only, enforcing that each keypoint belongs
    to at most one active track.
    """

    tracks: dict[int, Track] = field(default_factory=dict)
    index: dict[tuple[int, int], int] = field(default_factory=dict)
    next_id: int = 0
    stats: dict = field(default_factory=lambda: {
        "created": 0, "continued": 0, "filtered": 0,
        "rejected_create": 0, "rejected_continue": 0, "conflicts": 0})

    def active_ids(self) -> list[int]:
        return [tid for tid, t in self.tracks.items() if t.status == "active"]

    def track_of(self, scan_id: int, keypoint_index: int) -> int | None:
        return self.index.get((scan_id, keypoint_index))

    def _admit(self, observations: list[Observation], poses, threshold, seed):
        """Shared admission: robust consensus over >=2 observations from
        >=2 scans, all within the residual threshold. Returns (obs, q) or None."""
        pos = np.stack([o.position for o in observations])
        pose_list = [poses[o.scan_id] for o in observations]
        try:
            mask, q = aggregation_ransac(pos, pose_list, threshold, seed)
        except NoConsensus:
            return None
        kept = [o for o, m in zip(observations, mask) if m]
        if len({o.scan_id for o in kept}) < 2:
            return None
        # enforce one observation per scan, keeping the lower-residual one
        by_scan: dict[int, Observation] = {}
        for o in kept:
            cur = by_scan.get(o.scan_id)
            if cur is None:
                by_scan[o.scan_id] = o
            else:
                self.stats["conflicts"] += 1
                r_new = _residual(o, poses, q)
                r_cur = _residual(cur, poses, q)
                if r_new < r_cur:
                    by_scan[o.scan_id] = o
        kept = sorted(by_scan.values(), key=lambda o: o.key)
        if len(kept) < 2:
            return None
        q, _ = aggregate(np.stack([o.position for o in kept]),
                         [poses[o.scan_id] for o in kept])
        return kept, q

    def create_tracks(self, match_pairs, keypoint_positions, poses,
                      threshold: float, seed: int = 0) -> list[int]:
        """Create tracks from keypoint matches between registered scans.

        ``match_pairs`` is an iterable of ((scan_a, kp_a), (scan_b, kp_b));
        ``keypoint_positions[scan_id]`` is that scan's (N, 3) keypoint array;
        ``poses[scan_id]`` the registered pose. Matched keypoints are grouped
        transitively (union-find), each group is aggregated, and only groups
        passing robust admission become tracks. Keypoints already claimed by
        an active track never join a new one.
        """
        parent: dict[tuple[int, int], tuple[int, int]] = {}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(x, y):
            rx, ry = find(x), find(y)
            if rx != ry:
                parent[max(rx, ry)] = min(rx, ry)

        for (a, b) in match_pairs:
            a, b = tuple(a), tuple(b)
            if a in self.index or b in self.index:
                self.stats["conflicts"] += 1
                continue
            for key in (a, b):
                if key not in parent:
                    parent[key] = key
            union(a, b)

        groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for key in parent:
            groups.setdefault(find(key), []).append(key)

        created = []
        for root in sorted(groups):
            members = sorted(groups[root])
            if len({s for s, _ in members}) < 2:
                self.stats["rejected_create"] += 1
                continue
            obs = [Observation(s, k, keypoint_positions[s][k]) for s, k in members]
            admitted = self._admit(obs, poses, threshold, seed)
            if admitted is None:
                self.stats["rejected_create"] += 1
                continue
            kept, q = admitted
            tid = self.next_id
            self.next_id += 1
            self.tracks[tid] = Track(q, kept)
            for o in kept:
                self.index[o.key] = tid
            self.stats["created"] += 1
            created.append(tid)
        return created

    def continue_tracks(self, candidates, poses, threshold: float,
                        seed: int = 0) -> list[int]:
        """Extend existing tracks with observations from a newly registered scan.

        ``candidates`` is an iterable of (track_id, Observation). When one
        keypoint matches several tracks, or one track attracts several new
        keypoints, the lower-residual continuation wins. A continuation is
        applied only when the new observation survives robust re-aggregation.
        """
        best_for_key: dict[tuple[int, int], tuple[float, int, Observation]] = {}
        for tid, obs in candidates:
            track = self.tracks.get(tid)
            if track is None or track.status != "active":
                continue
            if obs.scan_id in track.scan_ids() or obs.key in self.index:
                self.stats["conflicts"] += 1
                continue
            r = _residual(obs, poses, track.landmark)
            cur = best_for_key.get(obs.key)
            if cur is None or (r, tid) < (cur[0], cur[1]):
                best_for_key[obs.key] = (r, tid, obs)

        best_for_track: dict[int, tuple[float, Observation]] = {}
        for r, tid, obs in best_for_key.values():
            cur = best_for_track.get(tid)
            if cur is None or (r, obs.key) < (cur[0], cur[1].key):
                best_for_track[tid] = (r, obs)

        updated = []
        for tid in sorted(best_for_track):
            _, obs = best_for_track[tid]
            track = self.tracks[tid]
            extended = track.observations + [obs]
            pos = np.stack([o.position for o in extended])
            pose_list = [poses[o.scan_id] for o in extended]
            try:
                mask, q = aggregation_ransac(pos, pose_list, threshold, seed)
            except NoConsensus:
                self.stats["rejected_continue"] += 1
                continue
            if not mask[-1]:
                self.stats["rejected_continue"] += 1
                continue
            track.observations = extended
            track.landmark = q
            self.index[obs.key] = tid
            self.stats["continued"] += 1
            updated.append(tid)
        return updated

    def filter_tracks(self, poses, max_residual: float,
                      min_length: int = 2) -> list[int]:
        """Mark tracks too short or with a too-large residual as filtered and
        release their index entries. Idempotent."""
        filtered = []
        for tid in sorted(self.tracks):
            track = self.tracks[tid]
            if track.status != "active":
                continue
            drop = len(track) < min_length
            if not drop:
                _, residuals = aggregate(
                    np.stack([o.position for o in track.observations]),
                    [poses[o.scan_id] for o in track.observations])
                drop = bool(residuals.max() > max_residual)
            if drop:
                track.status = "filtered"
                for o in track.observations:
                    if self.index.get(o.key) == tid:
                        del self.index[o.key]
                self.stats["filtered"] += 1
                filtered.append(tid)
        return filtered

    def reaggregate(self, poses) -> None:
        """Recompute every active landmark from its observations (closed form)."""
        for tid in self.active_ids():
            track = self.tracks[tid]
            q, _ = aggregate(np.stack([o.position for o in track.observations]),
                             [poses[o.scan_id] for o in track.observations])
            track.landmark = q

    def visible_track_count(self, keypoint_refs) -> int:
        """Distinct active tracks reachable from (scan_id, keypoint_index) refs."""
        seen = set()
        for key in keypoint_refs:
            tid = self.index.get(tuple(key))
            if tid is not None:
                seen.add(tid)
        return len(seen)

    def max_residuals(self, poses) -> dict[int, float]:
        out = {}
        for tid in self.active_ids():
            track = self.tracks[tid]
            _, residuals = aggregate(
                np.stack([o.position for o in track.observations]),
                [poses[o.scan_id] for o in track.observations])
            out[tid] = float(residuals.max())
        return out


def _residual(obs: Observation, poses, q: np.ndarray) -> float:
    T = poses[obs.scan_id]
    return float(np.linalg.norm(obs.position - T.apply(q)))
