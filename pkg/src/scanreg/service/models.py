"""Request and response schemas for the registration service.

Jobs reference files on a filesystem shared between client and service;
point clouds never travel over the wire.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

ConfigOverrides = dict[str, float | int | bool | str]


class BuildGraphRequest(BaseModel):
    manifest: str
    output: str
    config: str | None = None
    overrides: ConfigOverrides = Field(default_factory=dict)


class BuildGraphResponse(BaseModel):
    output: str
    nodes: int
    edges: int
    rejected: int
    components: list[list[int]]


class RegisterRequest(BaseModel):
    graph: str
    output_dir: str
    config: str | None = None
    overrides: ConfigOverrides = Field(default_factory=dict)
    baseline: Literal["incremental", "mst"] = "incremental"


class RegisterResponse(BaseModel):
    poses: str
    tracks: str | None
    components: int
    registered: int
    unregistered: list[int]
    order: list[list[int]]


class RefineRequest(BaseModel):
    manifest: str
    model_dir: str
    output_dir: str
    config: str | None = None
    overrides: ConfigOverrides = Field(default_factory=dict)


class RefineResponse(BaseModel):
    poses: str
    tracks: str
    components: int
    reports: list[dict]


class EvaluateRequest(BaseModel):
    poses: str
    ground_truth: str
    manifest: str
    output: str | None = None
    fmt: Literal["json", "text"] = "json"
    recall_threshold: float = 0.2
    rotation_thresholds_deg: list[float] | None = None
    translation_thresholds: list[float] | None = None


class EvaluateResponse(BaseModel):
    recall: float
    recall_threshold: float
    mean_rotation_error_deg: float | None
    mean_translation_error: float | None
    rotation_ecdf_deg: list[tuple[float, float]]
    translation_ecdf: list[tuple[float, float]]
    rotation_errors_deg: dict[str, float]
    translation_errors: dict[str, float]
    unregistered: list[int]
    output: str | None


class SynthRequest(BaseModel):
    output_dir: str
    scene: Literal["room", "facade", "chain"] = "room"
    n_scans: int = 8
    overlap: float = 0.6
    noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    seed: int = 0
    points_per_scan: int = 4000
    keypoints_per_scan: int = 400
    n_groups: int = 1
    emit_keypoints: bool = True
    emit_matches: bool = True
    emit_dense: bool = False
    ply_format: Literal["binary", "ascii"] = "binary"


class SynthResponse(BaseModel):
    manifest: str
    ground_truth: str
    scans: int


class ExportRequest(BaseModel):
    manifest: str
    poses: str
    output: str


class ExportResponse(BaseModel):
    output: str
    points: int


class HealthResponse(BaseModel):
    status: str
    version: str
