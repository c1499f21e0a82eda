"""Evaluation against ground truth: gauge alignment, recall, and error ECDFs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .errors import NoCommonScans
from .geometry import RigidTransform, compose, invert, nearest_rotation, rotation_distance

DEFAULT_ROTATION_THRESHOLDS_DEG = (3.0, 5.0, 10.0, 30.0, 45.0)
DEFAULT_TRANSLATION_THRESHOLDS = (0.05, 0.1, 0.25, 0.5, 0.75)


@dataclass(frozen=True)
class GroundTruth:
    """Reference world -> scan poses."""

    poses: dict[int, RigidTransform]


@dataclass
class EvaluationReport:
    rotation_errors: dict[int, float]      # radians, per registered scan
    translation_errors: dict[int, float]   # meters, per registered scan
    recall: float
    recall_threshold: float
    rotation_ecdf: list[tuple[float, float]]     # (threshold deg, fraction)
    translation_ecdf: list[tuple[float, float]]  # (threshold m, fraction)
    unregistered: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValueError("recall must lie in [0, 1]")
        for table in (self.rotation_ecdf, self.translation_ecdf):
            values = [v for _, v in table]
            if any(b < a - 1e-12 for a, b in zip(values, values[1:])):
                raise ValueError("ECDF must be nondecreasing in the threshold")

    def mean_rotation_error(self) -> float:
        vals = list(self.rotation_errors.values())
        return float(np.mean(vals)) if vals else math.nan

    def mean_translation_error(self) -> float:
        vals = list(self.translation_errors.values())
        return float(np.mean(vals)) if vals else math.nan


def gauge_align(estimated: dict[int, RigidTransform],
                truth: dict[int, RigidTransform]) -> dict[int, RigidTransform]:
    """Remove the arbitrary world frame of an estimated pose set.

    Finds the single rigid motion G minimizing the least-squares discrepancy
    between {T_i_est o G} and {T_i_gt} over the common scans (rotation part by
    the orthogonal Procrustes solution, translation in closed form), and
    returns every estimated pose composed with G.
    """
    common = sorted(set(estimated) & set(truth))
    if not common:
        raise NoCommonScans("estimated and ground-truth poses share no scans")
    M = np.zeros((3, 3))
    for sid in common:
        M += estimated[sid].rotation.T @ truth[sid].rotation
    R_g = nearest_rotation(M)
    t_g = np.zeros(3)
    for sid in common:
        t_g += estimated[sid].rotation.T @ (truth[sid].translation
                                            - estimated[sid].translation)
    t_g /= len(common)
    G = RigidTransform(R_g, t_g)
    return {sid: compose(T, G) for sid, T in estimated.items()}


def registration_recall(estimated: dict[int, RigidTransform],
                        truth: dict[int, RigidTransform],
                        clouds: dict[int, PointCloud],
                        threshold: float = 0.2) -> float:
    """Fraction of scans whose mean world-frame point discrepancy between the
    estimated and true placement stays below the threshold.

    Inputs are expected gauge-aligned. Scans present in the truth but missing
    from the estimate count as failures.
    """
    ids = sorted(truth)
    if not ids:
        return 0.0
    hits = 0
    for sid in ids:
        if sid not in estimated:
            continue
        pts = clouds[sid].points
        est_world = invert(estimated[sid]).apply(pts)
        gt_world = invert(truth[sid]).apply(pts)
        mean_err = float(np.linalg.norm(est_world - gt_world, axis=1).mean())
        if mean_err < threshold:
            hits += 1
    return hits / len(ids)


def ecdf(errors, thresholds) -> list[tuple[float, float]]:
    """For each threshold, the fraction of errors at or below it.

    Thresholds must be sorted ascending. An empty error list yields an empty
    table rather than an error.
    """
    th = list(thresholds)
    if any(b < a for a, b in zip(th, th[1:])):
        raise ValueError("thresholds must be sorted ascending")
    errs = np.asarray(list(errors), dtype=np.float64)
    if len(errs) == 0:
        return []
    return [(float(t), float(np.mean(errs <= t))) for t in th]


def evaluate(estimated_components: list[dict[int, RigidTransform]],
             truth: GroundTruth, clouds: dict[int, PointCloud],
             recall_threshold: float = 0.2,
             rotation_thresholds_deg=DEFAULT_ROTATION_THRESHOLDS_DEG,
             translation_thresholds=DEFAULT_TRANSLATION_THRESHOLDS) -> EvaluationReport:
    """Full report over one or more estimated components.

    Each component is gauge-aligned to the truth independently; scans outside
    every component are unregistered and enter the recall and ECDF
    denominators as failures (error treated as infinite).
    """
    rot_err: dict[int, float] = {}
    trans_err: dict[int, float] = {}
    aligned_all: dict[int, RigidTransform] = {}
    for comp in estimated_components:
        aligned = gauge_align(comp, truth.poses)
        for sid, T in aligned.items():
            if sid not in truth.poses:
                continue
            aligned_all[sid] = T
            rot_err[sid] = rotation_distance(T, truth.poses[sid])
            trans_err[sid] = float(np.linalg.norm(
                T.translation - truth.poses[sid].translation))

    all_ids = sorted(truth.poses)
    unregistered = [sid for sid in all_ids if sid not in aligned_all]
    recall = registration_recall(aligned_all, truth.poses, clouds,
                                 recall_threshold)

    n = len(all_ids)
    rot_table = []
    for t in rotation_thresholds_deg:
        below = sum(1 for sid, e in rot_err.items()
                    if math.degrees(e) <= t)
        rot_table.append((float(t), below / n if n else 0.0))
    trans_table = []
    for t in translation_thresholds:
        below = sum(1 for e in trans_err.values() if e <= t)
        trans_table.append((float(t), below / n if n else 0.0))

    return EvaluationReport(rot_err, trans_err, recall, recall_threshold,
                            rot_table, trans_table, unregistered)


def report_to_dict(report: EvaluationReport) -> dict:
    return {
        "recall": report.recall,
        "recall_threshold": report.recall_threshold,
        "rotation_errors_deg": {str(k): math.degrees(v)
                                for k, v in sorted(report.rotation_errors.items())},
        "translation_errors": {str(k): v
                               for k, v in sorted(report.translation_errors.items())},
        "rotation_ecdf_deg": report.rotation_ecdf,
        "translation_ecdf": report.translation_ecdf,
        "unregistered": report.unregistered,
    }


def report_from_dict(data: dict) -> EvaluationReport:
    return EvaluationReport(
        {int(k): math.radians(v) for k, v in data["rotation_errors_deg"].items()},
        {int(k): float(v) for k, v in data["translation_errors"].items()},
        float(data["recall"]), float(data["recall_threshold"]),
        [(float(a), float(b)) for a, b in data["rotation_ecdf_deg"]],
        [(float(a), float(b)) for a, b in data["translation_ecdf"]],
        [int(s) for s in data["unregistered"]])


def emit_report(report: EvaluationReport, path: str | Path,
                fmt: str = "json") -> Path:
    """Write the report as machine-readable JSON or an aligned text table.
    Output is deterministic for identical reports."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report_to_dict(report), indent=2,
                                   sort_keys=True) + "\n")
    elif fmt == "text":
        lines = [
            f"registered scans : {len(report.rotation_errors)}",
            f"unregistered     : {sorted(report.unregistered)}",
            f"recall@{report.recall_threshold:g}m      : {report.recall:.4f}",
            "",
            f"{'scan':>6} {'rot_err_deg':>12} {'trans_err_m':>12}",
        ]
        for sid in sorted(report.rotation_errors):
            lines.append(f"{sid:>6} {math.degrees(report.rotation_errors[sid]):>12.4f} "
                         f"{report.translation_errors[sid]:>12.4f}")
        lines.append("")
        lines.append("rotation ECDF (deg): "
                     + "  ".join(f"{t:g}:{v:.3f}" for t, v in report.rotation_ecdf))
        lines.append("translation ECDF (m): "
                     + "  ".join(f"{t:g}:{v:.3f}" for t, v in report.translation_ecdf))
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown report format: {fmt}")
    return path
