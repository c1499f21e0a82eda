import numpy as np
import pytest

from scanreg.cloud import PointCloud
from scanreg.config import PipelineConfig
from scanreg.errors import BadMatrixShape
from scanreg.features import KeypointSet, MatchSet
from scanreg.graph import (ScanGraph, build_graph, geometric_verify,
                           overlap_scores, propose_edges)
from scanreg.geometry import compose, invert
from scanreg.synthetic import SceneConfig, generate_synthetic_scene

from conftest import random_transform


def bumpy_cloud(rng, n=4000, offset=(0.0, 0.0, 0.0)):
    pts = rng.uniform(-1, 1, size=(n, 3))
    pts[:, 2] = (0.3 * np.sin(3 * pts[:, 0]) + 0.2 * np.cos(2 * pts[:, 1])
                 + 0.05 * rng.normal(size=n))
    return PointCloud(pts + np.asarray(offset))


class TestOverlapScores:
    def test_identical_clouds_score_near_one(self, rng, fast_config):
        cloud = bumpy_cloud(rng)
        twin = PointCloud(cloud.points.copy())
        s = overlap_scores([cloud, twin], fast_config)
        assert 0.95 <= s[0, 1] <= 1.0

    def test_disjoint_clouds_score_near_zero(self, rng, fast_config):
        a = PointCloud(rng.uniform(0, 1, size=(2000, 3)))
        b = PointCloud(rng.uniform(0, 1, size=(2000, 3)) + [100.0, 0, 0])
        s = overlap_scores([a, b], fast_config)
        assert s[0, 1] < 0.05

    def test_precomputed_passthrough(self, rng, fast_config):
        clouds = [bumpy_cloud(rng, n=100) for _ in range(3)]
        m = np.array([[0.0, 0.5, 0.2], [0.5, 0.0, 0.7], [0.2, 0.7, 0.0]])
        out = overlap_scores(clouds, fast_config, precomputed=m)
        assert np.array_equal(out, m)

    def test_precomputed_shape_checked(self, rng, fast_config):
        clouds = [bumpy_cloud(rng, n=100) for _ in range(3)]
        with pytest.raises(BadMatrixShape):
            overlap_scores(clouds, fast_config, precomputed=np.zeros((2, 2)))
        bad = np.zeros((3, 3))
        bad[0, 1] = 1.0  # asymmetric
        with pytest.raises(BadMatrixShape):
            overlap_scores(clouds, fast_config, precomputed=bad)

    def test_matrix_is_symmetric(self, rng, fast_config):
        clouds = [bumpy_cloud(rng, n=800), bumpy_cloud(rng, n=800, offset=(0.5, 0, 0)),
                  bumpy_cloud(rng, n=800, offset=(5, 5, 5))]
        s = overlap_scores(clouds, fast_config)
        assert np.array_equal(s, s.T)
        assert np.all(np.diag(s) == 0)


class TestProposeEdges:
    def test_three_nodes_k2_gives_complete_graph(self, rng):
        s = rng.uniform(0, 1, size=(3, 3))
        s = (s + s.T) / 2
        np.fill_diagonal(s, 0)
        assert propose_edges(s, 2) == [(0, 1), (0, 2), (1, 2)]

    def test_chain_construction(self):
        # hand-built scores whose per-node best partners trace the chain
        s = np.zeros((4, 4))
        s[0, 1] = s[1, 0] = 0.90
        s[1, 2] = s[2, 1] = 0.95
        s[2, 3] = s[3, 2] = 0.96
        s[0, 2] = s[2, 0] = 0.10
        s[0, 3] = s[3, 0] = 0.10
        s[1, 3] = s[3, 1] = 0.10
        assert propose_edges(s, 1) == [(0, 1), (1, 2), (2, 3)]

    def test_k_saturates_to_all_pairs(self, rng):
        n = 5
        s = rng.uniform(0, 1, size=(n, n))
        s = (s + s.T) / 2
        np.fill_diagonal(s, 0)
        assert len(propose_edges(s, n - 1)) == n * (n - 1) // 2

    def test_monotone_in_k(self, rng):
        n = 8
        s = rng.uniform(0, 1, size=(n, n))
        s = (s + s.T) / 2
        np.fill_diagonal(s, 0)
        previous = set()
        for k in range(1, n):
            current = set(propose_edges(s, k))
            assert previous <= current
            previous = current


class TestGeometricVerify:
    def make_pair(self, rng, n):
        T = random_transform(rng)
        kp_i = KeypointSet(rng.uniform(-1, 1, size=(n, 3)), np.zeros((n, 0)))
        kp_j = KeypointSet(T.apply(kp_i.positions), np.zeros((n, 0)))
        ms = MatchSet((0, 1), np.column_stack([np.arange(n), np.arange(n)]))
        return T, kp_i, kp_j, ms

    def test_exact_matches_accepted(self, rng):
        T, kp_i, kp_j, ms = self.make_pair(rng, 200)
        out = geometric_verify(ms, kp_i, kp_j, min_inliers=50,
                               min_inlier_ratio=0.3, iterations=500,
                               threshold=0.05, seed=0)
        assert out.accepted
        assert out.inlier_count == 200
        assert np.allclose(out.transform.rotation, T.rotation, atol=1e-9)

    def test_random_matches_rejected(self, rng):
        kp_i = KeypointSet(rng.uniform(-1, 1, size=(200, 3)), np.zeros((200, 0)))
        kp_j = KeypointSet(rng.uniform(-1, 1, size=(200, 3)), np.zeros((200, 0)))
        ms = MatchSet((0, 1), np.column_stack([np.arange(200),
                                               rng.permutation(200)]))
        out = geometric_verify(ms, kp_i, kp_j, min_inliers=50,
                               min_inlier_ratio=0.3, iterations=500,
                               threshold=0.05, seed=0)
        assert not out.accepted

    def test_count_threshold_binds(self, rng):
        _, kp_i, kp_j, ms = self.make_pair(rng, 40)
        out = geometric_verify(ms, kp_i, kp_j, min_inliers=50,
                               min_inlier_ratio=0.3, iterations=500,
                               threshold=0.05, seed=0)
        assert not out.accepted
        assert out.inlier_ratio == 1.0


class TestBuildGraph:
    def test_room_scene_is_connected(self, small_scene, fast_config):
        graph = build_graph(small_scene.scans, fast_config,
                            keypoints=small_scene.keypoints,
                            matches=small_scene.matches)
        assert len(graph.connected_components()) == 1
        assert len(graph.edges) >= 3

    def test_disjoint_scenes_split_into_two_components(self, fast_config):
        scene = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=6, overlap=0.6, n_groups=2,
            points_per_scan=2500, seed=21))
        graph = build_graph(scene.scans, fast_config,
                            keypoints=scene.keypoints, matches=scene.matches)
        comps = graph.connected_components()
        assert len(comps) == 2
        groups = [{scene.group_of[s] for s in comp} for comp in comps]
        assert all(len(g) == 1 for g in groups)

    def test_two_scans_single_edge(self, fast_config, rng):
        scene = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=2, overlap=0.6, points_per_scan=2500, seed=2))
        graph = build_graph(scene.scans, fast_config,
                            keypoints=scene.keypoints, matches=scene.matches)
        assert list(graph.edges) == [(0, 1)]

    def test_builtin_descriptor_path(self, small_scene, fast_config):
        graph = build_graph(small_scene.scans, fast_config)
        assert len(graph.connected_components()) == 1
        assert len(graph.edges) >= 3

    def test_all_edges_clear_thresholds(self, small_scene, fast_config):
        graph = build_graph(small_scene.scans, fast_config,
                            keypoints=small_scene.keypoints,
                            matches=small_scene.matches)
        for data in graph.edges.values():
            assert data.inlier_count >= fast_config.min_edge_inliers
            assert data.inlier_ratio >= fast_config.min_edge_inlier_ratio

    def test_orientation_consistency(self, small_scene, fast_config):
        graph = build_graph(small_scene.scans, fast_config,
                            keypoints=small_scene.keypoints,
                            matches=small_scene.matches)
        for (i, j) in graph.edges:
            loop = compose(graph.transform(i, j), graph.transform(j, i))
            assert np.abs(loop.rotation - np.eye(3)).max() < 1e-9
            assert np.abs(loop.translation).max() < 1e-9

    def test_full_config_is_superset_of_sparse(self, room_scene, fast_config):
        n = len(room_scene.scans)
        sparse = build_graph(room_scene.scans,
                             fast_config.replace(edge_candidates_per_scan=1),
                             keypoints=room_scene.keypoints,
                             matches=room_scene.matches)
        full = build_graph(room_scene.scans,
                           fast_config.replace(edge_candidates_per_scan=n - 1),
                           keypoints=room_scene.keypoints,
                           matches=room_scene.matches)
        assert set(sparse.edges) <= set(full.edges)

    def test_isolated_nodes_remain(self, fast_config):
        scene = generate_synthetic_scene(SceneConfig(
            scene="room", n_scans=4, overlap=0.6, points_per_scan=2500, seed=5))
        # withhold every match touching scan 3 so it cannot verify
        matches = {e: m for e, m in scene.matches.items() if 3 not in e}
        graph = build_graph(scene.scans, fast_config,
                            keypoints=scene.keypoints, matches=matches)
        assert 3 in graph.nodes
        assert graph.neighbors(3) == []


class TestScanGraphContainer:
    def test_rejects_unknown_nodes(self):
        graph = ScanGraph()
        kp = KeypointSet(np.zeros((1, 3)), np.zeros((1, 0)))
        graph.add_node(0, kp)
        from scanreg.graph import EdgeData
        data = EdgeData(MatchSet((0, 1), [[0, 0]]),
                        random_transform(np.random.default_rng(0)),
                        np.array([True]), 1, 1.0, 0.5)
        with pytest.raises(KeyError):
            graph.add_edge(0, 1, data)

    def test_subgraph_restricts_edges(self, small_scene, fast_config):
        graph = build_graph(small_scene.scans, fast_config,
                            keypoints=small_scene.keypoints,
                            matches=small_scene.matches)
        sub = graph.subgraph({0, 1})
        assert set(sub.nodes) == {0, 1}
        assert all(set(e) <= {0, 1} for e in sub.edges)
