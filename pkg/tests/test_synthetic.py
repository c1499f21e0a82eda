import numpy as np
import pytest

from scanreg.errors import InvalidConfig
from scanreg.synthetic import SceneConfig, generate_synthetic_scene


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        cfg = SceneConfig(scene="room", n_scans=4, overlap=0.6,
                          noise_sigma=0.004, outlier_rate=0.1,
                          points_per_scan=2000, seed=42)
        a = generate_synthetic_scene(cfg)
        b = generate_synthetic_scene(cfg)
        for sid in a.scans:
            assert np.array_equal(a.scans[sid].points, b.scans[sid].points)
        for edge in a.matches:
            assert np.array_equal(a.matches[edge].pairs, b.matches[edge].pairs)

    def test_noise_only_affects_coordinates(self):
        clean = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=4, overlap=0.6, points_per_scan=2000, seed=8))
        noisy = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=4, overlap=0.6, points_per_scan=2000,
            noise_sigma=0.01, seed=8))
        for sid in clean.scans:
            assert len(clean.scans[sid]) == len(noisy.scans[sid])
            assert np.array_equal(clean.keypoint_globals[sid],
                                  noisy.keypoint_globals[sid])


class TestNoiseContract:
    def test_empirical_sigma_within_five_percent(self):
        sigma = 0.01
        base = SceneConfig(scene="room", n_scans=8, overlap=0.6,
                           points_per_scan=15000, seed=77)
        clean = generate_synthetic_scene(base)
        noisy = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=8, overlap=0.6, points_per_scan=15000,
            noise_sigma=sigma, seed=77))
        deltas = np.concatenate(
            [(noisy.scans[s].points - clean.scans[s].points).ravel()
             for s in clean.scans])
        assert len(deltas) >= 1e5
        assert abs(deltas.std() - sigma) / sigma < 0.05


class TestStructure:
    def test_outlier_rate_realized(self):
        scene = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=4, overlap=0.6, outlier_rate=0.2,
            points_per_scan=2500, seed=5))
        for (i, j), ms in scene.matches.items():
            gi = scene.keypoint_globals[i][ms.pairs[:, 0]]
            gj = scene.keypoint_globals[j][ms.pairs[:, 1]]
            wrong = (gi != gj).mean()
            assert 0.1 <= wrong <= 0.3

    def test_matches_link_identical_world_points_when_clean(self):
        scene = generate_synthetic_scene(SceneConfig(
            scene="facade", n_scans=4, overlap=0.6,
            points_per_scan=2500, seed=6))
        for (i, j), ms in scene.matches.items():
            gi = scene.keypoint_globals[i][ms.pairs[:, 0]]
            gj = scene.keypoint_globals[j][ms.pairs[:, 1]]
            assert np.array_equal(gi, gj)

    def test_groups_have_no_cross_matches(self):
        scene = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=8, overlap=0.6, n_groups=2,
            points_per_scan=2000, seed=9))
        for (i, j) in scene.matches:
            assert scene.group_of[i] == scene.group_of[j]
        groups = set(scene.group_of.values())
        assert groups == {0, 1}

    def test_chain_scene_generates(self):
        scene = generate_synthetic_scene(SceneConfig(
            scene="chain", n_scans=5, overlap=0.6,
            points_per_scan=2500, seed=10))
        assert len(scene.scans) == 5
        assert all(len(c) >= 10 for c in scene.scans.values())

    def test_scan_normals_are_unit(self):
        scene = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=2, overlap=0.6, points_per_scan=2000, seed=1))
        for cloud in scene.scans.values():
            lengths = np.linalg.norm(cloud.normals, axis=1)
            assert np.abs(lengths - 1.0).max() < 1e-9


class TestValidation:
    def test_unknown_scene_type(self):
        with pytest.raises(InvalidConfig):
            generate_synthetic_scene(SceneConfig(scene="city"))

    def test_too_few_scans(self):
        with pytest.raises(InvalidConfig):
            generate_synthetic_scene(SceneConfig(n_scans=1))

    def test_group_needs_two_scans(self):
        with pytest.raises(InvalidConfig):
            generate_synthetic_scene(SceneConfig(n_scans=4, n_groups=3))

    def test_bad_overlap(self):
        with pytest.raises(InvalidConfig):
            generate_synthetic_scene(SceneConfig(overlap=1.0))
