"""File-level orchestration of the pipeline stages.

Each job reads its inputs from disk, runs the corresponding in-memory stage,
writes its outputs, and returns a summary dict. The HTTP service and the CLI
are thin wrappers around these functions.
"""

from __future__ import annotations

import math
from pathlib import Path

from . import storage
from .config import PipelineConfig
from .engine import mst_baseline, run_incremental
from .errors import DataError
from .evaluation import (DEFAULT_ROTATION_THRESHOLDS_DEG,
                         DEFAULT_TRANSLATION_THRESHOLDS, emit_report, evaluate,
                         report_to_dict)
from .graph import build_graph
from .refine import quantize_matches, refine_model
from .synthetic import SceneConfig, generate_synthetic_scene


def load_config(config_path: str | None, overrides: dict | None) -> PipelineConfig:
    cfg = PipelineConfig.from_file(config_path) if config_path else PipelineConfig()
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg


def build_graph_job(manifest_path: str, output_path: str,
                    config: PipelineConfig) -> dict:
    manifest = storage.read_manifest(manifest_path)
    scans = manifest.load_clouds()
    keypoints = manifest.load_keypoints()
    matches = None
    if config.dense_matches:
        if manifest.dense_matches is None:
            raise DataError("config requests dense matches but the manifest "
                            "names no dense_matches file")
        dense = storage.read_dense_matches(manifest.dense_matches)
        quantized = quantize_matches(dense, config.quantize_cell)
        keypoints = quantized.keypoints
        matches = quantized.matches
    elif manifest.matches is not None:
        matches = storage.read_matches(manifest.matches)
    overlap = None
    if manifest.overlap is not None:
        overlap = storage.read_overlap(manifest.overlap)

    graph = build_graph(scans, config, keypoints=keypoints, matches=matches,
                        overlap=overlap)
    storage.write_graph(output_path, graph)
    return {
        "output": str(output_path),
        "nodes": len(graph.nodes),
        "edges": len(graph.edges),
        "rejected": graph.stats.get("rejected", 0),
        "components": graph.connected_components(),
    }


def register_job(graph_path: str, output_dir: str, config: PipelineConfig,
                 baseline: str = "incremental") -> dict:
    graph = storage.read_graph(graph_path)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if baseline == "mst":
        poses = mst_baseline(graph)
        components = {}
        for comp_id, comp in enumerate(graph.connected_components()):
            for sid in comp:
                components[sid] = comp_id
        unregistered = [s for s in graph.nodes if s not in poses]
        poses_path = storage.write_poses(out / "poses.txt", poses,
                                         components, unregistered)
        return {"poses": str(poses_path), "tracks": None,
                "components": len(graph.connected_components()),
                "registered": len(poses), "unregistered": sorted(unregistered),
                "order": [sorted(c) for c in graph.connected_components()]}
    if baseline != "incremental":
        raise DataError(f"unknown registration mode: {baseline}")

    models = run_incremental(graph, config)
    poses_path, tracks_path = storage.write_model(out, models,
                                                  sorted(graph.nodes))
    registered = {sid for m in models for sid in m.poses}
    return {"poses": str(poses_path), "tracks": str(tracks_path),
            "components": len(models), "registered": len(registered),
            "unregistered": sorted(set(graph.nodes) - registered),
            "order": [list(m.order) for m in models]}


def refine_job(manifest_path: str, model_dir: str, output_dir: str,
               config: PipelineConfig) -> dict:
    manifest = storage.read_manifest(manifest_path)
    scans = manifest.load_clouds()
    models = storage.read_model(model_dir)
    if not models:
        raise DataError(f"{model_dir}: no model to refine")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    refined_models = []
    reports = []
    for model in models:
        missing = [s for s in model.poses if s not in scans]
        if missing:
            raise DataError(f"manifest lacks clouds for scans {missing}")
        if not model.tracks.tracks:
            raise DataError(f"component {model.component_id} has no tracks; "
                            "refine needs the track dump from registration")
        refined, info = refine_model(model, scans, config)
        refined_models.append(refined)
        reports.append({"component": model.component_id, **info})
    poses_path, tracks_path = storage.write_model(out, refined_models,
                                                  sorted(scans))
    return {"poses": str(poses_path), "tracks": str(tracks_path),
            "components": len(refined_models), "reports": reports}


def evaluate_job(poses_path: str, ground_truth_path: str, manifest_path: str,
                 output_path: str | None = None, fmt: str = "json",
                 recall_threshold: float = 0.2,
                 rotation_thresholds_deg=DEFAULT_ROTATION_THRESHOLDS_DEG,
                 translation_thresholds=DEFAULT_TRANSLATION_THRESHOLDS) -> dict:
    poses, components, _ = storage.read_poses(poses_path)
    truth = storage.read_ground_truth(ground_truth_path)
    manifest = storage.read_manifest(manifest_path)
    clouds = manifest.load_clouds()

    by_component: dict[int, dict] = {}
    for sid, T in poses.items():
        by_component.setdefault(components.get(sid, 0), {})[sid] = T
    report = evaluate([by_component[c] for c in sorted(by_component)],
                      truth, clouds, recall_threshold,
                      rotation_thresholds_deg, translation_thresholds)
    if output_path:
        emit_report(report, output_path, fmt)
    data = report_to_dict(report)
    data["mean_rotation_error_deg"] = (
        math.degrees(report.mean_rotation_error())
        if report.rotation_errors else None)
    data["mean_translation_error"] = (
        report.mean_translation_error() if report.translation_errors else None)
    data["output"] = str(output_path) if output_path else None
    return data


def synth_job(output_dir: str, scene: SceneConfig,
              emit_keypoints: bool = True, emit_matches: bool = True,
              emit_dense: bool = False, ply_format: str = "binary") -> dict:
    from .ply import write_ply

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    generated = generate_synthetic_scene(scene)

    scan_files, kp_files = {}, {}
    for sid, cloud in sorted(generated.scans.items()):
        name = f"scan_{sid:03d}.ply"
        write_ply(out / name, cloud, fmt=ply_format)
        scan_files[sid] = name
        if emit_keypoints:
            kp_name = f"keypoints_{sid:03d}.npz"
            storage.write_keypoints(out / kp_name, generated.keypoints[sid])
            kp_files[sid] = kp_name
    matches_name = None
    if emit_matches:
        matches_name = "matches.txt"
        storage.write_matches(out / matches_name, generated.matches)
    dense_name = None
    if emit_dense:
        dense_name = "dense_matches.txt"
        storage.write_dense_matches(out / dense_name,
                                    generated.dense_matches())
    storage.write_poses(out / "ground_truth.txt", generated.ground_truth.poses)
    manifest_path = storage.write_manifest(
        out / "manifest.json", scan_files,
        kp_files if emit_keypoints else None,
        matches=matches_name, dense_matches=dense_name)
    return {"manifest": str(manifest_path),
            "ground_truth": str(out / "ground_truth.txt"),
            "scans": len(generated.scans)}


def export_job(manifest_path: str, poses_path: str, output_path: str) -> dict:
    manifest = storage.read_manifest(manifest_path)
    clouds = manifest.load_clouds()
    poses, _, _ = storage.read_poses(poses_path)
    path, count = storage.export_fused_ply(output_path, clouds, poses)
    return {"output": str(path), "points": count}
