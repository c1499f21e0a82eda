import math

import numpy as np
import pytest

from scanreg.cloud import PointCloud
from scanreg.config import PipelineConfig
from scanreg.errors import EmptyNeighborhood
from scanreg.evaluation import evaluate
from scanreg.geometry import invert
from scanreg.refine import (DenseMatches, Patch, build_coarse_model,
                            extract_patch, quantize_matches, refine_model,
                            refine_track, rms_track_spread)
from scanreg.synthetic import SceneConfig, generate_synthetic_scene
from scanreg.tracks import Observation, Track

from conftest import random_transform


def coarse_config():
    return PipelineConfig(seed=0, min_init_matches=30, min_visible_tracks=10,
                          ransac_threshold=0.25, track_residual=0.3,
                          ransac_iterations=1000)


class TestQuantizeMatches:
    def test_same_cell_pairs_deduplicate(self):
        dense = [DenseMatches((0, 1),
                              [[0.01, 0.0, 0.0], [0.02, 0.0, 0.0]],
                              [[1.01, 0.0, 0.0], [1.02, 0.0, 0.0]])]
        out = quantize_matches(dense, cell=0.1)
        assert len(out.matches[(0, 1)]) == 1

    def test_nearby_endpoints_share_keypoint_id(self):
        # one physical spot reported at two slightly different coordinates
        # in two different pairs must map to one keypoint id
        dense = [
            DenseMatches((0, 1), [[0.51, 0.5, 0.5]], [[5.01, 0.0, 0.0]]),
            DenseMatches((1, 2), [[5.04, 0.0, 0.0]], [[2.5, 2.5, 2.5]]),
        ]
        out = quantize_matches(dense, cell=0.1)
        id_from_01 = out.matches[(0, 1)].pairs[0, 1]
        id_from_12 = out.matches[(1, 2)].pairs[0, 0]
        assert id_from_01 == id_from_12

    def test_tiny_cell_preserves_matches_exactly(self, rng):
        a = rng.uniform(0, 1, size=(20, 3))
        b = rng.uniform(0, 1, size=(20, 3))
        out = quantize_matches([DenseMatches((0, 1), a, b)], cell=1e-7)
        assert len(out.matches[(0, 1)]) == 20
        kp0 = out.keypoints[0].positions
        kp1 = out.keypoints[1].positions
        pairs = out.matches[(0, 1)].pairs
        restored_a = kp0[pairs[:, 0]]
        restored_b = kp1[pairs[:, 1]]
        assert np.allclose(np.sort(restored_a, axis=0), np.sort(a, axis=0))
        assert np.allclose(np.sort(restored_b, axis=0), np.sort(b, axis=0))

    def test_idempotent_at_fixed_cell(self, rng):
        a = rng.uniform(0, 1, size=(200, 3))
        b = rng.uniform(0, 1, size=(200, 3))
        once = quantize_matches([DenseMatches((0, 1), a, b)], cell=0.2)
        pairs = once.matches[(0, 1)].pairs
        again = quantize_matches(
            [DenseMatches((0, 1), once.keypoints[0].positions[pairs[:, 0]],
                          once.keypoints[1].positions[pairs[:, 1]])], cell=0.2)
        assert np.allclose(np.sort(again.keypoints[0].positions, axis=0),
                           np.sort(once.keypoints[0].positions[
                               np.unique(pairs[:, 0])], axis=0))
        assert len(again.matches[(0, 1)]) == len(np.unique(pairs, axis=0))


class TestExtractPatch:
    def test_dense_plane(self, rng):
        pts = np.column_stack([rng.uniform(-1, 1, 2000),
                               rng.uniform(-1, 1, 2000), np.zeros(2000)])
        patch = extract_patch(PointCloud(pts), np.zeros(3), k=64, radius=0.5)
        assert len(patch.points) == 64
        assert not patch.padded
        assert np.abs(patch.points[:, 2]).max() == 0.0

    def test_isolated_center_raises(self, rng):
        pts = rng.uniform(10, 11, size=(100, 3))
        with pytest.raises(EmptyNeighborhood):
            extract_patch(PointCloud(pts), np.zeros(3), k=16, radius=0.5)

    def test_sparse_neighborhood_padded(self):
        pts = np.array([[0.0, 0, 0], [0.05, 0, 0], [0.0, 0.05, 0]])
        patch = extract_patch(PointCloud(pts), np.zeros(3), k=8, radius=0.2)
        assert patch.padded
        assert patch.n_real == 3
        assert len(patch.points) == 8

    def test_points_respect_radius(self, rng):
        pts = rng.uniform(-1, 1, size=(3000, 3))
        center = np.array([0.1, 0.2, 0.0])
        patch = extract_patch(PointCloud(pts), center, k=32, radius=0.3)
        assert np.linalg.norm(patch.points - center, axis=1).max() <= 0.3


def copied_patch_setup(rng, n=250):
    """Two scans sampling identical physical points, quantized observations
    offset differently, so refinement must re-converge them."""
    world = rng.uniform(-1, 1, size=(n, 3))
    world[:, 2] = 0.05 * np.sin(5 * world[:, 0]) + 0.03 * rng.normal(size=n)
    T0, T1 = random_transform(rng), random_transform(rng)
    clouds = {0: PointCloud(T0.apply(world)), 1: PointCloud(T1.apply(world))}
    poses = {0: T0, 1: T1}
    return world, clouds, poses


class TestRefineTrack:
    def test_identical_patches_converge_in_world_frame(self, rng):
        # copy-patch construction: both patches crop around the same physical
        # center, so they hold identical points and must vote identically
        world, clouds, poses = copied_patch_setup(rng)
        for k in (17, 101, 222):
            X = world[k] + np.array([0.05, -0.03, 0.01])
            obs = [Observation(s, 0, poses[s].apply(X)) for s in (0, 1)]
            track = Track(world[k].copy(), obs)
            patches = [extract_patch(clouds[o.scan_id], o.position, 48, 0.3)
                       for o in obs]
            refined = refine_track(track, 0, patches, poses, seed=3)
            assert not refined.degenerate
            w = [invert(poses[o.scan_id]).apply(o.position)
                 for o in refined.observations]
            assert np.linalg.norm(w[0] - w[1]) < 1e-6

    def test_offset_patches_usually_reconverge(self, rng):
        # quantization-style scatter: centers offset differently per scan;
        # most votes recover an exactly consistent point, and the guard keeps
        # the originals otherwise, so spread never grows
        world, clouds, poses = copied_patch_setup(rng)
        improved = 0
        trials = 20
        for t in range(trials):
            X = world[rng.integers(len(world))]
            obs = [Observation(s, 0, poses[s].apply(
                X + rng.uniform(-0.06, 0.06, 3))) for s in (0, 1)]
            track = Track(X.copy(), obs)
            patches = [extract_patch(clouds[o.scan_id], o.position, 48, 0.3)
                       for o in obs]
            refined = refine_track(track, 0, patches, poses, seed=t)
            w = [invert(poses[o.scan_id]).apply(o.position)
                 for o in refined.observations]
            before = np.linalg.norm(
                invert(poses[0]).apply(obs[0].position)
                - invert(poses[1]).apply(obs[1].position))
            after = np.linalg.norm(w[0] - w[1])
            assert after <= before + 1e-9
            improved += after < 1e-6
        assert improved >= trials // 2

    def test_single_observation_rejected(self, rng):
        world, clouds, poses = copied_patch_setup(rng)
        obs = [Observation(0, 0, clouds[0].points[0])]
        track = Track(world[0].copy(), obs)
        patch = extract_patch(clouds[0], obs[0].position, 16, 0.3)
        with pytest.raises(ValueError):
            refine_track(track, 0, [patch], poses, seed=0)

    def test_deterministic_per_seed(self, rng):
        world, clouds, poses = copied_patch_setup(rng)
        X = world[42]
        obs = [Observation(s, 0, poses[s].apply(X + off))
               for s, off in ((0, [0.06, 0.0, 0.0]), (1, [0.0, -0.06, 0.0]))]
        track = Track(X.copy(), obs)
        patches = [extract_patch(clouds[o.scan_id], o.position, 48, 0.3)
                   for o in obs]
        a = refine_track(track, 0, patches, poses, seed=11)
        b = refine_track(track, 0, patches, poses, seed=11)
        for oa, ob in zip(a.observations, b.observations):
            assert np.array_equal(oa.position, ob.position)

    def test_refined_point_stays_in_patch_sphere(self, rng):
        world, clouds, poses = copied_patch_setup(rng)
        for trial in range(10):
            X = world[rng.integers(len(world))]
            obs = [Observation(s, 0, poses[s].apply(
                X + rng.uniform(-0.06, 0.06, 3))) for s in (0, 1)]
            track = Track(X.copy(), obs)
            patches = [extract_patch(clouds[o.scan_id], o.position, 48, 0.3)
                       for o in obs]
            refined = refine_track(track, 0, patches, poses, seed=trial)
            for o, patch in zip(refined.observations, patches):
                assert np.linalg.norm(o.position - patch.center) <= 0.3 + 1e-9

    def test_constant_features_keep_originals(self, rng):
        world, clouds, poses = copied_patch_setup(rng)
        X = world[5]
        obs = [Observation(s, 0, poses[s].apply(X)) for s in (0, 1)]
        track = Track(X.copy(), obs)

        def flat_features(points, center):
            return np.ones((len(points), 4))

        patches = [extract_patch(clouds[o.scan_id], o.position, 32, 0.3,
                                 feature_fn=flat_features) for o in obs]
        refined = refine_track(track, 0, patches, poses, seed=0)
        assert refined.degenerate
        for o_in, o_out in zip(obs, refined.observations):
            assert np.array_equal(o_in.position, o_out.position)


@pytest.fixture(scope="module")
def coarse_setup():
    scene = generate_synthetic_scene(SceneConfig(
        scene="room", n_scans=4, overlap=0.6, points_per_scan=2500,
        seed=104))
    quant = quantize_matches(scene.dense_matches(max_per_pair=2500), 0.2)
    cfg = coarse_config()
    models = build_coarse_model(scene.scans, quant, cfg)
    return scene, quant, cfg, models


class TestCoarseAndRefineModel:
    def test_coarse_model_registers_everything(self, coarse_setup):
        scene, _, _, models = coarse_setup
        assert len(models) == 1
        assert sorted(models[0].poses) == sorted(scene.scans)
        report = evaluate([models[0].poses], scene.ground_truth, scene.scans)
        assert math.degrees(report.mean_rotation_error()) < 2.0

    def test_coarse_residuals_bounded_by_cell_diagonal(self, coarse_setup):
        scene, _, _, models = coarse_setup
        residuals = models[0].tracks.max_residuals(models[0].poses)
        assert max(residuals.values()) <= 0.2 * math.sqrt(3) + 0.05

    def test_empty_matches_no_model(self):
        scene = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=2, overlap=0.6, points_per_scan=2500, seed=1))
        quant = quantize_matches(
            [DenseMatches((0, 1), np.zeros((0, 3)), np.zeros((0, 3)))], 0.2)
        models = build_coarse_model(scene.scans, quant, coarse_config())
        assert models == []

    def test_refine_improves_rotation_and_spread(self, coarse_setup):
        scene, _, cfg, models = coarse_setup
        model = models[0]
        before = evaluate([model.poses], scene.ground_truth, scene.scans)
        spread_before = rms_track_spread(model.tracks, model.poses)
        refined, info = refine_model(model, scene.scans, cfg)
        after = evaluate([refined.poses], scene.ground_truth, scene.scans)
        assert after.mean_rotation_error() < before.mean_rotation_error()
        assert info["spread_after"] < spread_before
        assert info["final_energy"] <= info["initial_energy"]

    def test_refine_never_worsens_spread_noise_free(self, coarse_setup):
        scene, _, cfg, models = coarse_setup
        model = models[0]
        spread_before = rms_track_spread(model.tracks, model.poses)
        _, info = refine_model(model, scene.scans, cfg)
        assert info["spread_after"] <= spread_before + 1e-9
