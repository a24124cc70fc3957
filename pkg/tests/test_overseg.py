"""Greedy merging, association costs, boundary refinement and incremental
updates."""

import numpy as np
import pytest

from segmap3d.geometry import (SegmentStats, Segmentation, SurfelMap,
                               build_graph, compute_segment_stats)
from segmap3d.overseg import (OversegParams, association_cost, greedy_merge,
                              integrate_updates, refine_boundaries,
                              segment_map, size_cost, size_cost_of_sizes)

from oracles import (connected_graphs, is_merge_local_minimum,
                     min_cost_over_contractions)


def flat_map(points, normal=(0.0, 0.0, 1.0), edges=None):
    pts = np.asarray(points, dtype=np.float64)
    adjacency = np.asarray(edges, dtype=np.int64) if edges is not None \
        else np.empty((0, 2), np.int64)
    return SurfelMap(positions=pts, adjacency=adjacency,
                     normals=np.tile(np.asarray(normal), (len(pts), 1)))


def grid_strip(nx, ny, spacing=0.01, z=0.0, x0=0.0, normal=(0, 0, 1.0)):
    """Planar nx-by-ny grid with 4-connectivity, returned as (points, edges)."""
    pts = []
    for i in range(nx):
        for j in range(ny):
            pts.append([x0 + i * spacing, j * spacing, z])
    edges = []
    for i in range(nx):
        for j in range(ny):
            a = i * ny + j
            if j + 1 < ny:
                edges.append([a, a + 1])
            if i + 1 < nx:
                edges.append([a, a + ny])
    return np.asarray(pts), np.asarray(edges)


class TestSizeCost:
    def seg_of_sizes(self, sizes):
        n = sum(sizes)
        assign = np.concatenate([np.full(s, i) for i, s in enumerate(sizes)])
        smap = flat_map(np.random.default_rng(0).normal(size=(n, 3)))
        return Segmentation(smap, assign)

    def test_exact_sizes(self):
        assert size_cost(self.seg_of_sizes([60, 60]), 60) == 0.0

    def test_symmetric_deviation(self):
        assert size_cost(self.seg_of_sizes([30, 90]), 60) == 30.0

    def test_all_singletons(self):
        assert size_cost(self.seg_of_sizes([1] * 10), 60) == 59.0

    def test_empty_is_error(self):
        smap = flat_map(np.zeros((3, 3)))
        seg = Segmentation(smap, np.full(3, -1))
        with pytest.raises(ValueError, match="empty"):
            size_cost(seg, 60)


class TestAssociationCost:
    def test_coincident_parallel(self):
        st = SegmentStats(np.zeros(3), np.eye(3), np.array([0, 0, 1.0]), 5)
        assert association_cost([0, 0, 0], [0, 0, 1], st, 1.0) == 0.0

    def test_unit_offset_perpendicular(self):
        st = SegmentStats(np.zeros(3), np.eye(3), np.array([0, 0, 1.0]), 5)
        assert association_cost([1, 0, 0], [1, 0, 0], st, 1.0) == pytest.approx(2.0)

    def test_antiparallel_is_free(self):
        st = SegmentStats(np.zeros(3), np.eye(3), np.array([0, 0, 1.0]), 5)
        assert association_cost([0, 0, 0], [0, 0, -1], st, 7.0) == pytest.approx(0.0)


class TestGreedy:
    def test_chain_collapses(self):
        edges = np.array([[0, 1], [1, 2], [2, 3]])
        log = []
        roots = greedy_merge(4, edges, np.zeros(3), 4, cost_log=log)
        assert len(np.unique(roots)) == 1
        assert log[0] == 3.0 and log[-1] == 0.0
        assert all(b < a for a, b in zip(log, log[1:]))

    def test_monotone_on_random_graphs(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            n = int(rng.integers(5, 60))
            m = int(rng.integers(n - 1, 3 * n))
            edges = rng.integers(0, n, size=(m, 2))
            edges = edges[edges[:, 0] != edges[:, 1]]
            w = rng.random(len(edges))
            log = []
            greedy_merge(n, edges, w, int(rng.integers(2, 12)), cost_log=log)
            assert all(b < a - 1e-12 for a, b in zip(log, log[1:]))

    def test_two_plates_split_at_crease(self):
        # two perpendicular 5x10 plates joined at a concave crease
        pts_a, edges_a = grid_strip(5, 10, spacing=0.01)
        pts_b = np.array([[0.0 - k * 0.0, j * 0.01, 0.01 + i * 0.01]
                          for i in range(5) for j in range(10) for k in [0]])
        pts_b[:, 0] = 0.0
        edges_b = edges_a + 50
        crease = [[j, 50 + j] for j in range(10)]
        pts = np.concatenate([pts_a, pts_b])
        normals = np.concatenate([np.tile([0, 0, 1.0], (50, 1)),
                                  np.tile([1.0, 0, 0], (50, 1))])
        edges = np.concatenate([edges_a, edges_b, np.asarray(crease)])
        smap = SurfelMap(positions=pts, adjacency=edges, normals=normals)
        graph = build_graph(smap)
        params = OversegParams(expected_size=50, refine_rounds=2)
        seg = segment_map(graph, smap, params)
        assert seg.num_segments == 2
        # boundary exactly at the crease
        side_a = seg.assignment[:50]
        side_b = seg.assignment[50:]
        assert len(np.unique(side_a)) == 1 and len(np.unique(side_b)) == 1
        assert side_a[0] != side_b[0]
        # no further merge decreases the cost
        assert is_merge_local_minimum(seg.assignment, edges, 50)

    @pytest.mark.parametrize("expected_size", [2, 4])
    def test_small_graphs_against_bruteforce(self, expected_size):
        from oracles import partition_tables
        rng = np.random.default_rng(17)
        for n in range(1, 6):
            tables = partition_tables(n, expected_size)
            for edges in connected_graphs(n):
                e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
                for w in (np.zeros(len(e)), rng.random(len(e))):
                    log = []
                    roots = greedy_merge(n, e, w, expected_size, cost_log=log)
                    assert all(b < a - 1e-12 for a, b in zip(log, log[1:]))
                    assert is_merge_local_minimum(roots, edges, expected_size)
                    best = min_cost_over_contractions(n, edges, expected_size,
                                                      tables)
                    assert log[-1] >= best - 1e-12

    def test_determinism(self):
        rng = np.random.default_rng(3)
        n = 40
        edges = rng.integers(0, n, size=(100, 2))
        edges = edges[edges[:, 0] != edges[:, 1]]
        w = rng.choice([0.0, 0.5, 1.0], size=len(edges))  # plenty of ties
        a = greedy_merge(n, edges, w, 6)
        b = greedy_merge(n, edges.copy(), w.copy(), 6)
        np.testing.assert_array_equal(a, b)


class TestRefinement:
    def plane_scene(self):
        pts, edges = grid_strip(10, 10, spacing=0.01)
        smap = flat_map(pts, edges=edges)
        return smap

    def test_fixed_point(self):
        smap = self.plane_scene()
        # two clean halves of the plane: already at the per-element argmin
        assign = (smap.positions[:, 0] > 0.045).astype(np.int64)
        seg = Segmentation(smap, assign)
        before = seg.assignment.copy()
        refine_boundaries(smap, seg, OversegParams(expected_size=50,
                                                   refine_rounds=2))
        np.testing.assert_array_equal(seg.assignment, before)

    def test_misassigned_element_returns(self):
        smap = self.plane_scene()
        assign = (smap.positions[:, 0] > 0.045).astype(np.int64)
        seg = Segmentation(smap, assign)
        victim = 0  # far inside segment 0
        seg.assignment[victim] = 1
        seg.refresh_stats()
        cost_own = association_cost(smap.positions[victim],
                                    smap.normals[victim], seg.stats[0], 1.0)
        cost_far = association_cost(smap.positions[victim],
                                    smap.normals[victim], seg.stats[1], 1.0)
        assert cost_own < cost_far
        refine_boundaries(smap, seg, OversegParams(expected_size=50,
                                                   refine_rounds=1))
        assert seg.assignment[victim] == 0

    def test_zero_rounds_is_identity(self):
        smap = self.plane_scene()
        seg = Segmentation(smap, np.arange(len(smap)) % 7)
        before = seg.assignment.copy()
        out = refine_boundaries(smap, seg, OversegParams(expected_size=20,
                                                         refine_rounds=0))
        assert out is seg
        np.testing.assert_array_equal(seg.assignment, before)

    def test_total_cost_non_increasing_with_frozen_stats(self):
        rng = np.random.default_rng(8)
        pts, edges = grid_strip(12, 12, spacing=0.01)
        smap = flat_map(pts, edges=edges)
        seg = Segmentation(smap, rng.integers(0, 6, size=len(pts)))
        params = OversegParams(expected_size=24, refine_rounds=1)

        def total_cost(assignment, stats):
            return sum(association_cost(smap.positions[i], smap.normals[i],
                                        stats[int(assignment[i])], 1.0)
                       for i in range(len(smap)))

        frozen = seg.stats
        before = total_cost(seg.assignment, frozen)
        refine_boundaries(smap, seg, params)
        after = total_cost(seg.assignment, frozen)
        assert after <= before + 1e-9


class TestIncremental:
    def segmented_plane(self):
        pts, edges = grid_strip(10, 10, spacing=0.01)
        smap = flat_map(pts, edges=edges)
        graph = build_graph(smap)
        seg = segment_map(graph, smap, OversegParams(expected_size=25,
                                                     refine_rounds=1))
        return smap, seg

    def test_empty_delta(self):
        smap, seg = self.segmented_plane()
        before = seg.assignment.copy()
        out, changed = integrate_updates(smap, seg, np.empty(0, np.int64),
                                         OversegParams(expected_size=25))
        assert changed == set()
        np.testing.assert_array_equal(out.assignment, before)

    def test_coincident_element_adopted(self):
        smap, seg = self.segmented_plane()
        target = int(seg.labels[0])
        # move an element onto its own segment center: zero cost, adopted back
        member = np.nonzero(seg.assignment == target)[0][0]
        smap.positions[member] = seg.centers[seg.rows_of([target])[0]]
        smap.normals[member] = seg.normals[seg.rows_of([target])[0]]
        out, changed = integrate_updates(smap, seg, [member],
                                         OversegParams(expected_size=25,
                                                       refine_rounds=0))
        assert out.assignment[member] == target
        assert target in changed

    def test_unknown_element(self):
        smap, seg = self.segmented_plane()
        with pytest.raises(ValueError, match="unknown element"):
            integrate_updates(smap, seg, [len(smap) + 4],
                              OversegParams(expected_size=25))

    def test_far_pool_gets_new_segments(self):
        pts, edges = grid_strip(10, 10, spacing=0.01)
        far_pts, far_edges = grid_strip(5, 5, spacing=0.01, x0=5.0)
        all_pts = np.concatenate([pts, far_pts])
        all_edges = np.concatenate([edges, far_edges + 100])
        smap = flat_map(all_pts, edges=all_edges)
        assign = np.full(125, -1, dtype=np.int64)
        assign[:100] = 0
        seg = Segmentation(smap, assign)
        out, changed = integrate_updates(
            smap, seg, np.arange(100, 125),
            OversegParams(expected_size=25, refine_rounds=1))
        new = np.unique(out.assignment[100:])
        assert np.all(new > 0)
        assert np.all(out.assignment[:100] == 0)
        assert set(int(l) for l in new).issubset(changed)

    def test_untouched_assignments_unchanged(self):
        smap, seg = self.segmented_plane()
        before = seg.assignment.copy()
        upd = np.array([0, 1, 2, 55])
        out, _ = integrate_updates(smap, seg, upd,
                                   OversegParams(expected_size=25,
                                                 refine_rounds=2))
        untouched = np.setdiff1d(np.arange(len(smap)), upd)
        np.testing.assert_array_equal(out.assignment[untouched],
                                      before[untouched])

    def test_sequence_close_to_batch(self):
        # L-shaped scene: the class boundary coincides with the crease, so
        # both batch and incremental segmentation should respect it
        from segmap3d.metrics import oversegmentation_error
        rng = np.random.default_rng(4)
        floor_pts, floor_edges = grid_strip(20, 24, spacing=0.01)
        wall_pts = np.array([[0.0, j * 0.01, 0.01 + i * 0.01]
                             for i in range(20) for j in range(24)])
        wall_edges = floor_edges + len(floor_pts)
        crease = np.array([[j, len(floor_pts) + j] for j in range(24)])
        pts = np.concatenate([floor_pts, wall_pts])
        normals = np.concatenate([np.tile([0, 0, 1.0], (len(floor_pts), 1)),
                                  np.tile([1.0, 0, 0], (len(wall_pts), 1))])
        edges = np.concatenate([floor_edges, wall_edges, crease])
        smap = SurfelMap(positions=pts, adjacency=edges, normals=normals)
        gt = (np.arange(len(pts)) >= len(floor_pts)).astype(np.int64)
        params = OversegParams(expected_size=24, refine_rounds=1)

        batch = segment_map(build_graph(smap), smap, params)
        inc = Segmentation(smap, np.full(len(smap), -1, dtype=np.int64))
        order = rng.permutation(len(smap))
        for chunk in np.array_split(order, 6):
            inc, _ = integrate_updates(smap, inc, chunk, params)
        ose_batch, _ = oversegmentation_error(batch.assignment, gt)
        ose_inc, _ = oversegmentation_error(inc.assignment, gt)
        assert abs(ose_batch - ose_inc) <= 2.0
