"""File formats tying the pipeline stages together.

All text formats are deterministic (stable ordering, shortest round-trip
float repr), so identical runs produce byte-identical files.

  - scan manifest: JSON listing scan ids with cloud paths and optional
    keypoint / match / dense-match / overlap-matrix paths
  - keypoints: npz with ``positions`` (N,3) and ``descriptors`` (N,D)
  - matches: text records ``i j a b score`` (keypoint index pairs)
  - dense matches: text records ``i j xi yi zi xj yj zj``
  - poses: text records ``scan component r00..r22 tx ty tz`` plus an
    ``# unregistered:`` trailer
  - graph dump: JSON with nodes, verified edges, transforms, and stats
  - tracks: text blocks ``track <id> <status> <qx qy qz>`` followed by
    ``obs <scan> <kp> <px py pz> <residual>`` lines
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .engine import RegistrationModel
from .errors import DataError
from .evaluation import GroundTruth
from .features import KeypointSet, MatchSet
from .geometry import RigidTransform, invert
from .graph import EdgeData, ScanGraph
from .ply import read_ply
from .refine import DenseMatches
from .tracks import Observation, Track, TrackStore


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# manifest

@dataclass
class Manifest:
    clouds: dict[int, Path]
    keypoints: dict[int, Path] = field(default_factory=dict)
    matches: Path | None = None
    dense_matches: Path | None = None
    overlap: Path | None = None

    def load_clouds(self) -> dict[int, PointCloud]:
        return {sid: read_ply(p) for sid, p in sorted(self.clouds.items())}

    def load_keypoints(self) -> dict[int, KeypointSet] | None:
        if not self.keypoints:
            return None
        return {sid: read_keypoints(p) for sid, p in sorted(self.keypoints.items())}


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    base = path.parent
    try:
        clouds, keypoints = {}, {}
        for entry in data["scans"]:
            sid = int(entry["id"])
            clouds[sid] = base / entry["cloud"]
            if "keypoints" in entry:
                keypoints[sid] = base / entry["keypoints"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from exc
    if len(clouds) != len(data["scans"]):
        raise DataError(f"{path}: duplicate scan ids")
    return Manifest(
        clouds, keypoints,
        base / data["matches"] if data.get("matches") else None,
        base / data["dense_matches"] if data.get("dense_matches") else None,
        base / data["overlap"] if data.get("overlap") else None)


def write_manifest(path: str | Path, scan_files: dict[int, str],
                   keypoint_files: dict[int, str] | None = None,
                   matches: str | None = None, dense_matches: str | None = None,
                   overlap: str | None = None) -> Path:
    """Paths are stored relative to the manifest location."""
    path = Path(path)
    scans = []
    for sid in sorted(scan_files):
        entry = {"id": sid, "cloud": scan_files[sid]}
        if keypoint_files and sid in keypoint_files:
            entry["keypoints"] = keypoint_files[sid]
        scans.append(entry)
    data = {"scans": scans}
    if matches:
        data["matches"] = matches
    if dense_matches:
        data["dense_matches"] = dense_matches
    if overlap:
        data["overlap"] = overlap
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# keypoints, matches, overlap

def write_keypoints(path: str | Path, kp: KeypointSet) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, positions=kp.positions, descriptors=kp.descriptors)
    return path


def read_keypoints(path: str | Path) -> KeypointSet:
    try:
        with np.load(path) as data:
            return KeypointSet(data["positions"], data["descriptors"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read keypoints {path}: {exc}") from exc


def write_matches(path: str | Path,
                  matches: dict[tuple[int, int], MatchSet]) -> Path:
    path = Path(path)
    lines = ["# scanreg matches v1: i j a b score"]
    for (i, j) in sorted(matches):
        ms = matches[(i, j)]
        scores = ms.scores if ms.scores is not None else np.ones(len(ms))
        for (a, b), s in zip(ms.pairs, scores):
            lines.append(f"{i} {j} {a} {b} {_fmt(s)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_matches(path: str | Path) -> dict[tuple[int, int], MatchSet]:
    grouped: dict[tuple[int, int], list] = {}
    for tokens in _records(path, 5, "matches"):
        i, j, a, b = (int(t) for t in tokens[:4])
        grouped.setdefault((i, j), []).append((a, b, float(tokens[4])))
    out = {}
    for edge, rows in grouped.items():
        pairs = np.array([(a, b) for a, b, _ in rows], dtype=np.int64)
        scores = np.array([s for _, _, s in rows])
        try:
            out[edge] = MatchSet(edge, pairs, scores)
        except ValueError as exc:
            raise DataError(f"{path}: bad match set for edge {edge}: {exc}") from exc
    return out


def write_dense_matches(path: str | Path, dense: list[DenseMatches]) -> Path:
    path = Path(path)
    lines = ["# scanreg dense matches v1: i j xi yi zi xj yj zj"]
    for dm in sorted(dense, key=lambda d: d.edge):
        i, j = dm.edge
        for a, b in zip(dm.points_i, dm.points_j):
            lines.append(f"{i} {j} " + " ".join(_fmt(v) for v in a) + " "
                         + " ".join(_fmt(v) for v in b))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dense_matches(path: str | Path) -> list[DenseMatches]:
    grouped: dict[tuple[int, int], list] = {}
    for tokens in _records(path, 8, "dense matches"):
        i, j = int(tokens[0]), int(tokens[1])
        grouped.setdefault((i, j), []).append([float(t) for t in tokens[2:]])
    out = []
    for edge in sorted(grouped):
        rows = np.array(grouped[edge])
        out.append(DenseMatches(edge, rows[:, :3], rows[:, 3:]))
    return out


def write_overlap(path: str | Path, matrix: np.ndarray) -> Path:
    path = Path(path)
    lines = [" ".join(_fmt(v) for v in row) for row in np.asarray(matrix)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_overlap(path: str | Path) -> np.ndarray:
    try:
        return np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read overlap matrix {path}: {exc}") from exc


def _records(path: str | Path, width: int, what: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields")
        yield tokens


# ---------------------------------------------------------------------------
# poses

def write_poses(path: str | Path, poses: dict[int, RigidTransform],
                components: dict[int, int] | None = None,
                unregistered: list[int] | None = None) -> Path:
    path = Path(path)
    lines = ["# scanreg poses v1",
             "# scan component r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for sid in sorted(poses):
        T = poses[sid]
        comp = components.get(sid, 0) if components else 0
        row = list(T.rotation.reshape(-1)) + list(T.translation)
        lines.append(f"{sid} {comp} " + " ".join(_fmt(v) for v in row))
    lines.append("# unregistered: "
                 + " ".join(str(s) for s in sorted(unregistered or [])))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_poses(path: str | Path):
    """Returns (poses, components, unregistered)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read poses {path}: {exc}") from exc
    poses: dict[int, RigidTransform] = {}
    components: dict[int, int] = {}
    unregistered: list[int] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("# unregistered:"):
            tail = stripped.split(":", 1)[1].split()
            unregistered = [int(t) for t in tail]
            continue
        stripped = stripped.split("#", 1)[0].strip()
        if not stripped:
            continue
        tokens = stripped.split()
        if len(tokens) != 14:
            raise DataError(f"{path}:{lineno}: expected 14 fields")
        sid, comp = int(tokens[0]), int(tokens[1])
        vals = [float(t) for t in tokens[2:]]
        try:
            poses[sid] = RigidTransform(np.array(vals[:9]).reshape(3, 3),
                                        np.array(vals[9:]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: invalid transform: {exc}") from exc
        components[sid] = comp
    return poses, components, unregistered


def read_ground_truth(path: str | Path) -> GroundTruth:
    poses, _, _ = read_poses(path)
    return GroundTruth(poses)


def model_components(models: list[RegistrationModel]) -> dict[int, int]:
    return {sid: m.component_id for m in models for sid in m.poses}


def merged_poses(models: list[RegistrationModel]) -> dict[int, RigidTransform]:
    return {sid: T for m in models for sid, T in m.poses.items()}


# ---------------------------------------------------------------------------
# scan graph dump

def write_graph(path: str | Path, graph: ScanGraph) -> Path:
    path = Path(path)
    nodes = [{"id": sid,
              "keypoints": [[float(v) for v in row]
                            for row in graph.nodes[sid].positions]}
             for sid in sorted(graph.nodes)]
    edges = []
    for (i, j) in sorted(graph.edges):
        e = graph.edges[(i, j)]
        edges.append({
            "i": i, "j": j,
            "rotation": [float(v) for v in e.transform.rotation.reshape(-1)],
            "translation": [float(v) for v in e.transform.translation],
            "inlier_count": int(e.inlier_count),
            "inlier_ratio": float(e.inlier_ratio),
            "overlap_score": float(e.overlap_score),
            "pairs": [[int(a), int(b)] for a, b in e.matches.pairs],
            "inlier_mask": [int(v) for v in e.inlier_mask],
        })
    stats = {"proposed": graph.stats.get("proposed", 0),
             "rejected": graph.stats.get("rejected", 0),
             "rejections": [
                 {"edge": list(r["edge"]), "reason": r["reason"],
                  "inlier_count": int(r["inlier_count"]),
                  "inlier_ratio": float(r["inlier_ratio"])}
                 for r in graph.stats.get("rejections", [])]}
    path.write_text(json.dumps({"nodes": nodes, "edges": edges, "stats": stats},
                               indent=1, sort_keys=True) + "\n")
    return path


def read_graph(path: str | Path) -> ScanGraph:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read graph {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    graph = ScanGraph()
    try:
        for node in data["nodes"]:
            positions = np.array(node["keypoints"], dtype=np.float64).reshape(-1, 3)
            graph.add_node(int(node["id"]),
                           KeypointSet(positions, np.zeros((len(positions), 0))))
        for e in data["edges"]:
            i, j = int(e["i"]), int(e["j"])
            transform = RigidTransform(
                np.array(e["rotation"], dtype=np.float64).reshape(3, 3),
                np.array(e["translation"], dtype=np.float64))
            pairs = np.array(e["pairs"], dtype=np.int64).reshape(-1, 2)
            mask = np.array(e["inlier_mask"], dtype=bool)
            graph.add_edge(i, j, EdgeData(MatchSet((i, j), pairs), transform,
                                          mask, int(e["inlier_count"]),
                                          float(e["inlier_ratio"]),
                                          float(e["overlap_score"])))
        graph.stats.update(data.get("stats", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed graph dump: {exc}") from exc
    return graph


# ---------------------------------------------------------------------------
# tracks

def write_tracks(path: str | Path, store: TrackStore,
                 poses: dict[int, RigidTransform]) -> Path:
    from .tracks import aggregate

    path = Path(path)
    lines = ["# scanreg tracks v1",
             "# track <id> <status> <qx> <qy> <qz>",
             "# obs <scan> <kp> <px> <py> <pz> <residual>"]
    for tid in sorted(store.tracks):
        track = store.tracks[tid]
        q = track.landmark
        lines.append(f"track {tid} {track.status} "
                     + " ".join(_fmt(v) for v in q))
        residuals = None
        if track.status == "active" and all(o.scan_id in poses
                                            for o in track.observations):
            _, residuals = aggregate(
                np.stack([o.position for o in track.observations]),
                [poses[o.scan_id] for o in track.observations])
        for k, o in enumerate(track.observations):
            r = residuals[k] if residuals is not None else float("nan")
            lines.append(f"obs {o.scan_id} {o.keypoint_index} "
                         + " ".join(_fmt(v) for v in o.position)
                         + f" {_fmt(r)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_tracks(path: str | Path) -> TrackStore:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read tracks {path}: {exc}") from exc
    store = TrackStore()
    current: Track | None = None
    tid = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        tokens = stripped.split()
        if tokens[0] == "track":
            if len(tokens) != 6:
                raise DataError(f"{path}:{lineno}: bad track record")
            tid = int(tokens[1])
            current = Track(np.array([float(t) for t in tokens[3:]]),
                            [], status=tokens[2])
            store.tracks[tid] = current
            store.next_id = max(store.next_id, tid + 1)
        elif tokens[0] == "obs":
            if current is None or len(tokens) != 7:
                raise DataError(f"{path}:{lineno}: bad observation record")
            obs = Observation(int(tokens[1]), int(tokens[2]),
                              np.array([float(t) for t in tokens[3:6]]))
            current.observations.append(obs)
            if current.status == "active":
                store.index[obs.key] = tid
        else:
            raise DataError(f"{path}:{lineno}: unknown record {tokens[0]!r}")
    return store


def write_model(out_dir: str | Path, models: list[RegistrationModel],
                all_scan_ids: list[int]) -> tuple[Path, Path]:
    """Dump poses and tracks of an incremental run into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poses = merged_poses(models)
    unregistered = [s for s in all_scan_ids if s not in poses]
    poses_path = write_poses(out / "poses.txt", poses,
                             model_components(models), unregistered)
    lines = []
    for m in models:
        tracks_path = out / f"tracks_{m.component_id}.txt"
        write_tracks(tracks_path, m.tracks, m.poses)
        lines.append(tracks_path.name)
    (out / "tracks_index.txt").write_text("\n".join(lines) + "\n")
    return poses_path, out / "tracks_index.txt"


def read_model(model_dir: str | Path) -> list[RegistrationModel]:
    model_dir = Path(model_dir)
    poses, components, _ = read_poses(model_dir / "poses.txt")
    index_path = model_dir / "tracks_index.txt"
    track_files = []
    if index_path.exists():
        track_files = [model_dir / name
                       for name in index_path.read_text().split()]
    models: dict[int, RegistrationModel] = {}
    for sid in sorted(poses):
        comp = components.get(sid, 0)
        model = models.setdefault(comp, RegistrationModel(component_id=comp))
        model.poses[sid] = poses[sid]
        model.order.append(sid)
    for model in models.values():
        # the registration order is not persisted; recover the anchor (the
        # scan registered at identity) so gauge fixing stays consistent
        def identity_gap(sid):
            T = model.poses[sid]
            return (np.abs(T.rotation - np.eye(3)).max()
                    + np.abs(T.translation).max())
        model.order.sort(key=lambda s: (identity_gap(s) > 1e-12, s))
    for path in track_files:
        store = read_tracks(path)
        comp = int(path.stem.split("_")[-1])
        if comp in models:
            models[comp].tracks = store
    return [models[c] for c in sorted(models)]


# ---------------------------------------------------------------------------
# fused export

def export_fused_ply(path: str | Path, clouds: dict[int, PointCloud],
                     poses: dict[int, RigidTransform]) -> tuple[Path, int]:
    """All registered clouds mapped into the world frame, one PLY."""
    from .ply import write_ply

    chunks = []
    normal_chunks = []
    with_normals = all(clouds[s].normals is not None for s in sorted(poses)
                       if s in clouds)
    for sid in sorted(poses):
        if sid not in clouds:
            continue
        inv = invert(poses[sid])
        chunks.append(inv.apply(clouds[sid].points))
        if with_normals:
            normal_chunks.append(clouds[sid].normals @ inv.rotation.T)
    if not chunks:
        raise DataError("no registered scan has a cloud to export")
    points = np.vstack(chunks)
    normals = np.vstack(normal_chunks) if with_normals and normal_chunks else None
    write_ply(path, PointCloud(points, normals))
    return Path(path), len(points)
