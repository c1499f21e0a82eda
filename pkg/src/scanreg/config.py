"""Pipeline configuration with a plain-text key = value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidConfig


@dataclass
class PipelineConfig:
    """Every tunable threshold of the pipeline. All distances in meters."""

    seed: int = 0

    # graph construction
    voxel_size: float = 0.05              # keypoint voxel cell
    descriptor_radius: float = 0.25
    normal_neighbors: int = 16
    match_ratio: float = 1.0              # Lowe ratio test, 1.0 disables
    edge_candidates_per_scan: int = 10    # top-k overlap partners proposed per scan
    min_edge_inliers: int = 30            # verification: required inlier count
    min_edge_inlier_ratio: float = 0.3    # verification: required inlier ratio
    ransac_iterations: int = 5000
    ransac_threshold: float = 0.07
    overlap_voxel: float = 0.1            # builtin overlap scorer downsample cell
    overlap_radius: float = 0.1           # neighbor radius after coarse alignment
    overlap_sample: int = 250             # keypoints per scan used for coarse alignment
    overlap_iterations: int = 300         # coarse-alignment RANSAC iterations

    # incremental engine
    min_init_matches: int = 100           # initial pair needs more inliers than this
    min_visible_tracks: int = 30          # next scan needs more visible tracks than this
    cluster_rotation_eps_deg: float = 5.0
    cluster_translation_eps: float = 0.2
    track_residual: float = 0.1           # admission / filtering residual bound
    min_track_length: int = 2
    global_ba_interval: int = 5           # global BA every g-th registration...
    global_ba_growth: float = 0.25        # ...or when the model grew by this fraction

    # bundle adjustment
    ba_loss: str = "squared"              # "squared" or "huber"
    ba_huber_scale: float = 0.1
    local_ba_max_iterations: int = 50
    global_ba_max_iterations: int = 100

    # detector-free refinement
    dense_matches: bool = False           # manifest matches carry coordinates, not indices
    quantize_cell: float = 0.2
    patch_size: int = 48
    patch_radius: float = 0.3
    refine_feature_neighbors: int = 3
    refine_spatial_neighbors: int = 3

    def replace(self, **kwargs) -> "PipelineConfig":
        return dataclasses.replace(self, **self._coerced(kwargs))

    @classmethod
    def _coerced(cls, items: dict) -> dict:
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in items.items():
            if key not in fields:
                raise InvalidConfig(f"unknown config key: {key}")
            out[key] = _coerce(raw, fields[key], key)
        return out

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        items = {}
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidConfig(f"cannot read config file: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            items[key] = value
        return cls(**cls._coerced(items))

    def to_file(self, path: str | Path) -> None:
        lines = [f"{f.name} = {getattr(self, f.name)}"
                 for f in dataclasses.fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw, annotation, key: str):
    target = {"int": int, "float": float, "str": str, "bool": bool}.get(
        annotation if isinstance(annotation, str) else annotation.__name__)
    if target is None:
        raise InvalidConfig(f"unsupported config field type for {key}")
    if isinstance(raw, str):
        raw = raw.strip()
        try:
            if target is bool:
                low = raw.lower()
                if low in _TRUE:
                    return True
                if low in _FALSE:
                    return False
                raise ValueError(raw)
            return target(raw)
        except ValueError as exc:
            raise InvalidConfig(f"bad value for {key}: {raw!r}") from exc
    if target is float and isinstance(raw, int):
        return float(raw)
    if not isinstance(raw, target) or (target is int and isinstance(raw, bool)):
        raise InvalidConfig(f"bad value for {key}: {raw!r}")
    return raw
