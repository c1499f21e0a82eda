import json
import math

import numpy as np
import pytest

from scanreg.cloud import PointCloud
from scanreg.errors import NoCommonScans
from scanreg.evaluation import (EvaluationReport, GroundTruth, ecdf,
                                emit_report, evaluate, gauge_align,
                                registration_recall, report_from_dict,
                                report_to_dict)
from scanreg.geometry import (RigidTransform, compose, rotation_distance,
                              rotation_from_axis_angle)

from conftest import random_transform


def pose_set(rng, n=5):
    return {s: random_transform(rng) for s in range(n)}


class TestGaugeAlign:
    def test_exact_input_unchanged(self, rng):
        gt = pose_set(rng)
        aligned = gauge_align(gt, gt)
        for s in gt:
            assert rotation_distance(aligned[s], gt[s]) < 1e-12
            assert np.linalg.norm(aligned[s].translation
                                  - gt[s].translation) < 1e-12

    def test_global_motion_removed_exactly(self, rng):
        gt = pose_set(rng)
        motion = random_transform(rng)
        est = {s: compose(T, motion) for s, T in gt.items()}
        aligned = gauge_align(est, gt)
        for s in gt:
            assert rotation_distance(aligned[s], gt[s]) < 1e-9
            assert np.linalg.norm(aligned[s].translation
                                  - gt[s].translation) < 1e-9

    def test_per_scan_perturbations_survive(self, rng):
        # oracle: perturb each pose by a known small rotation on top of a
        # global motion; after alignment the per-scan errors must match the
        # injected perturbations

        gt = pose_set(rng, n=8)
        motion = random_transform(rng)
        angles = {}
        est = {}
        for s, T in gt.items():
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            theta = float(rng.uniform(0.001, 0.02))
            dR = rotation_from_axis_angle(axis * theta)
            angles[s] = theta
            est[s] = compose(RigidTransform(dR, np.zeros(3)), compose(T, motion))
        aligned = gauge_align(est, gt)
        # the least-squares gauge absorbs a little of each perturbation, so
        # compare per-scan errors to the injected angles loosely
        for s in gt:
            err = rotation_distance(aligned[s], gt[s])
            assert err < angles[s] + 0.02

    def test_idempotent(self, rng):
        gt = pose_set(rng)
        est = {s: compose(T, random_transform(rng)) for s, T in gt.items()}
        once = gauge_align(est, gt)
        twice = gauge_align(once, gt)
        for s in gt:
            assert np.abs(once[s].rotation - twice[s].rotation).max() < 1e-12
            assert np.abs(once[s].translation - twice[s].translation).max() < 1e-12

    def test_no_common_scans(self, rng):
        with pytest.raises(NoCommonScans):
            gauge_align({0: RigidTransform.identity()},
                        {1: RigidTransform.identity()})


class TestRegistrationRecall:
    def make_clouds(self, rng, poses):
        return {s: PointCloud(rng.uniform(-1, 1, size=(200, 3)))
                for s in poses}

    def test_exact_recall_one(self, rng):
        gt = pose_set(rng, 4)
        clouds = self.make_clouds(rng, gt)
        assert registration_recall(gt, gt, clouds, 0.2) == 1.0

    def test_one_displaced_scan(self, rng):
        gt = pose_set(rng, 4)
        clouds = self.make_clouds(rng, gt)
        est = dict(gt)
        bad = compose(RigidTransform(np.eye(3), [1.0, 0, 0]), gt[2])
        est[2] = bad
        assert registration_recall(est, gt, clouds, 0.2) == 0.75

    def test_all_unregistered(self, rng):
        gt = pose_set(rng, 3)
        clouds = self.make_clouds(rng, gt)
        assert registration_recall({}, gt, clouds, 0.2) == 0.0

    def test_recall_at_infinity_counts_registered_only(self, rng):
        gt = pose_set(rng, 4)
        clouds = self.make_clouds(rng, gt)
        est = {s: gt[s] for s in (0, 1)}
        assert registration_recall(est, gt, clouds, 1e12) == 0.5


class TestEcdf:
    def test_all_zero_errors(self):
        table = ecdf([0.0, 0.0], [1.0, 2.0])
        assert [v for _, v in table] == [1.0, 1.0]

    def test_hand_counted_fractions(self):
        table = ecdf([1.0, 4.0, 20.0], [3.0, 5.0, 10.0, 30.0, 45.0])
        fractions = [v for _, v in table]
        assert fractions == [1 / 3, 2 / 3, 2 / 3, 1.0, 1.0]

    def test_empty_errors_flagged_not_crash(self):
        assert ecdf([], [1.0, 2.0]) == []

    def test_unsorted_thresholds_rejected(self):
        with pytest.raises(ValueError):
            ecdf([1.0], [2.0, 1.0])

    def test_monotone_nondecreasing(self, rng):
        errors = rng.exponential(1.0, size=50)
        thresholds = np.sort(rng.uniform(0, 4, size=10))
        values = [v for _, v in ecdf(errors, thresholds)]
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestEvaluateAndReport:
    def test_multi_component_unregistered_counted(self, rng):
        gt = GroundTruth(pose_set(rng, 6))
        clouds = {s: PointCloud(rng.uniform(-1, 1, size=(100, 3)))
                  for s in gt.poses}
        motion_a, motion_b = random_transform(rng), random_transform(rng)
        comp_a = {s: compose(gt.poses[s], motion_a) for s in (0, 1, 2)}
        comp_b = {s: compose(gt.poses[s], motion_b) for s in (3, 4)}
        report = evaluate([comp_a, comp_b], gt, clouds, 0.2)
        assert report.unregistered == [5]
        assert report.recall == pytest.approx(5 / 6)
        # ECDF denominators include the unregistered scan
        assert report.rotation_ecdf[-1][1] == pytest.approx(5 / 6)

    def test_report_round_trip(self, rng, tmp_path):
        gt = GroundTruth(pose_set(rng, 3))
        clouds = {s: PointCloud(rng.uniform(-1, 1, size=(50, 3)))
                  for s in gt.poses}
        report = evaluate([dict(gt.poses)], gt, clouds, 0.25)
        path = emit_report(report, tmp_path / "report.json", "json")
        parsed = report_from_dict(json.loads(path.read_text()))
        assert parsed.recall == report.recall
        assert parsed.rotation_ecdf == report.rotation_ecdf
        assert parsed.translation_errors.keys() == report.translation_errors.keys()

    def test_text_report_and_determinism(self, rng, tmp_path):
        gt = GroundTruth(pose_set(rng, 3))
        clouds = {s: PointCloud(rng.uniform(-1, 1, size=(50, 3)))
                  for s in gt.poses}
        report = evaluate([dict(gt.poses)], gt, clouds, 0.25)
        a = emit_report(report, tmp_path / "a.txt", "text").read_bytes()
        b = emit_report(report, tmp_path / "b.txt", "text").read_bytes()
        assert a == b
        assert b"recall" in a

    def test_nondecreasing_invariant_enforced(self):
        with pytest.raises(ValueError):
            EvaluationReport({}, {}, 0.5, 0.2,
                             [(1.0, 0.9), (2.0, 0.5)], [], [])
