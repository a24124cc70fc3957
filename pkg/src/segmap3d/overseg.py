"""Quasi-planar over-segmentation of surfel maps.

Segments grow by greedy merging of graph edges in ascending weight order,
accepting a merge only when it strictly lowers the mean absolute deviation
of segment sizes from the expected size. Boundaries are then refined by
reassigning elements to the segment with the lowest association cost, and
map updates are folded in incrementally without recomputing untouched
regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (COV_FLOOR, Segmentation, SurfelMap, WeightedGraph,
                       _stats_arrays, build_graph)


@dataclass
class OversegParams:
    """Tuning knobs for segmentation, refinement and incremental updates."""

    expected_size: int = 60          # target element count per segment
    normal_weight: float = 1.0       # angular term weight in the association cost
    refine_rounds: int = 2
    knn_candidates: int = 8          # candidate segments per element when refining
    association_threshold: float = 3.0  # max association cost for incremental adoption
    cov_floor: float = COV_FLOOR
    concavity_threshold: float = 1e-3   # m, for edge weights on incremental subgraphs
    concave_penalty: float = 5.0

    def __post_init__(self):
        if self.expected_size < 1:
            raise ValueError("expected_size must be >= 1")
        if self.normal_weight < 0 or self.refine_rounds < 0 or self.knn_candidates < 1:
            raise ValueError("invalid parameter value")


def size_cost(segmentation: Segmentation, expected_size: int) -> float:
    """Mean absolute deviation of segment sizes from the expected size."""
    if segmentation.num_segments == 0:
        raise ValueError("size cost is undefined for an empty segmentation")
    return float(np.abs(segmentation.sizes - expected_size).mean())


def size_cost_of_sizes(sizes, expected_size: int) -> float:
    sizes = np.asarray(sizes)
    if sizes.size == 0:
        raise ValueError("size cost is undefined for an empty segmentation")
    return float(np.abs(sizes - expected_size).mean())


def association_cost(position, normal, stats, normal_weight: float = 1.0) -> float:
    """Cost of associating one element with one segment.

    Mahalanobis-squared distance of the element position to the segment
    center under the segment covariance, plus `normal_weight` times the
    angular deviation 1 - |n_i . n_l| (orientation-free).
    """
    d = np.asarray(position, dtype=np.float64) - stats.center
    maha = float(d @ np.linalg.inv(stats.covariance) @ d)
    ang = 1.0 - abs(float(np.dot(np.asarray(normal, dtype=np.float64), stats.normal)))
    return maha + normal_weight * ang


class _UnionFind:
    __slots__ = ("parent", "size")

    def __init__(self, n):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, x):
        p = self.parent
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root

    def union(self, a, b):
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def _edge_shuffle_key(edges: np.ndarray) -> np.ndarray:
    """Deterministic pseudo-random key per undirected edge (splitmix64 mix).

    Equal-weight edges are visited in this order rather than by raw element
    id: id order sweeps a uniform-weight region from one corner, growing a
    single runaway segment, while a hash order scatters the merge frontier
    so segments grow in parallel. Pure integer arithmetic keeps the order
    reproducible everywhere.
    """
    lo = edges.min(axis=1).astype(np.uint64)
    hi = edges.max(axis=1).astype(np.uint64)
    z = (lo << np.uint64(32)) ^ hi
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z ^= z >> np.uint64(30)
    z = (z * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z ^= z >> np.uint64(27)
    z = (z * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> np.uint64(31))


def greedy_merge(num_elements: int, edges: np.ndarray, weights: np.ndarray,
                 expected_size: int, cost_log: list | None = None) -> np.ndarray:
    """Greedy cost-decreasing contraction of a weighted element graph.

    Starting from singleton segments, edges are visited in ascending weight
    order (ties in a deterministic hash-shuffled order) and the incident
    segments merged whenever that strictly decreases the size cost; passes
    repeat until no edge qualifies, so the result is stable against any
    further single merge. Each candidate is evaluated in O(1) from running
    sums.

    Returns the raw assignment (union-find roots). When `cost_log` is a
    list, the cost before merging and after every accepted merge is appended.
    """
    if num_elements == 0:
        raise ValueError("cannot segment an empty graph")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    s_bar = int(expected_size)

    uf = _UnionFind(num_elements)
    numerator = num_elements * abs(1 - s_bar)  # sum |size_l - s_bar|, exact integer
    count = num_elements
    if cost_log is not None:
        cost_log.append(numerator / count)

    if len(edges):
        order = np.lexsort((edges.max(axis=1), edges.min(axis=1),
                            _edge_shuffle_key(edges), weights))
        active = [(int(e[0]), int(e[1])) for e in edges[order]]
    else:
        active = []

    while active:
        merged_any = False
        survivors = []
        for i, j in active:
            ra, rb = uf.find(i), uf.find(j)
            if ra == rb:
                continue
            a, b = int(uf.size[ra]), int(uf.size[rb])
            delta = abs(a + b - s_bar) - abs(a - s_bar) - abs(b - s_bar)
            # accept iff (numerator + delta) / (count - 1) < numerator / count,
            # compared exactly in integers
            if count > 1 and (numerator + delta) * count < numerator * (count - 1):
                root = uf.union(ra, rb)
                numerator += delta
                count -= 1
                merged_any = True
                if cost_log is not None:
                    cost_log.append(numerator / count)
            else:
                survivors.append((i, j))
        if not merged_any:
            break
        active = survivors

    roots = np.fromiter((uf.find(i) for i in range(num_elements)),
                        dtype=np.int64, count=num_elements)
    return roots


def _compact_labels(raw: np.ndarray) -> np.ndarray:
    """Relabel to 0..L-1 in order of first appearance by element id."""
    seen = {}
    out = np.empty_like(raw)
    for i, r in enumerate(raw):
        label = seen.get(r)
        if label is None:
            label = len(seen)
            seen[r] = label
        out[i] = label
    return out


def segment_map(graph: WeightedGraph, smap: SurfelMap, params: OversegParams,
                cost_log: list | None = None) -> Segmentation:
    """Full over-segmentation: greedy merging followed by boundary refinement."""
    if len(graph.edges) != len(graph.weights):
        raise ValueError("graph edges and weights differ in length")
    raw = greedy_merge(len(smap), graph.edges, graph.weights,
                       params.expected_size, cost_log=cost_log)
    seg = Segmentation(smap, _compact_labels(raw), cov_floor=params.cov_floor)
    return refine_boundaries(smap, seg, params)


def _candidate_costs(smap, seg, element_ids, k, normal_weight):
    """Association costs of each element against its k nearest segments.

    Returns (cand_labels (m, k), costs (m, k)); missing candidates (fewer
    segments than k) are padded with label -1 and infinite cost.
    """
    pos = smap.positions[element_ids]
    kk = min(k, seg.num_segments)
    _, rows = seg.kdtree().query(pos, k=kk)
    rows = rows.reshape(len(element_ids), kk)
    inv = seg.inverse_covariances()

    diff = pos[:, None, :] - seg.centers[rows]
    maha = np.einsum("mki,mkij,mkj->mk", diff, inv[rows], diff)
    if smap.normals is not None:
        ndot = np.abs(np.einsum("mi,mki->mk", smap.normals[element_ids],
                                seg.normals[rows]))
    else:
        ndot = np.ones((len(element_ids), kk))
    costs = maha + normal_weight * (1.0 - ndot)
    return seg.labels[rows], costs


def _argmin_with_ties(cand_labels, costs):
    """Per row: label of minimal cost, ties broken toward the smaller label."""
    m, k = costs.shape
    best_cost = costs.min(axis=1)
    tie = costs == best_cost[:, None]
    masked_labels = np.where(tie, cand_labels, np.iinfo(np.int64).max)
    return masked_labels.min(axis=1), best_cost


def refine_boundaries(smap: SurfelMap, seg: Segmentation,
                      params: OversegParams) -> Segmentation:
    """Reassign each element to the lowest-association-cost nearby segment.

    Runs `refine_rounds` rounds; within a round every element is scored
    against its current segment and the `knn_candidates` segments with the
    nearest centers, using statistics frozen at the start of the round. An
    element moves only when a candidate is strictly cheaper than its current
    segment. Emptied segments are dropped and statistics recomputed after
    each round.
    """
    if params.refine_rounds == 0:
        return seg
    n = len(smap)
    ids = np.nonzero(seg.assignment >= 0)[0]
    if len(ids) == 0 or seg.num_segments == 0:
        return seg
    for _ in range(params.refine_rounds):
        cand_labels, costs = _candidate_costs(smap, seg, ids,
                                              params.knn_candidates,
                                              params.normal_weight)
        cur_cost = _current_costs(smap, seg, ids, params.normal_weight)
        best_label, best_cost = _argmin_with_ties(cand_labels, costs)
        move = best_cost < cur_cost
        if not np.any(move):
            break
        seg.assignment[ids[move]] = best_label[move]
        seg.refresh_stats()
    return seg


def _current_costs(smap, seg, element_ids, normal_weight):
    rows = seg.rows_of(seg.assignment[element_ids])
    inv = seg.inverse_covariances()
    diff = smap.positions[element_ids] - seg.centers[rows]
    cost = np.einsum("mi,mij,mj->m", diff, inv[rows], diff)
    if smap.normals is not None:
        cost += normal_weight * (1.0 - np.abs(
            np.einsum("mi,mi->m", smap.normals[element_ids], seg.normals[rows])))
    return cost


def integrate_updates(smap: SurfelMap, seg: Segmentation,
                      updated_elements, params: OversegParams):
    """Fold updated or newly observed elements into an existing segmentation.

    Each updated element joins the nearby existing segment with the lowest
    association cost when that cost is within `association_threshold`;
    leftovers are re-segmented as a batch restricted to the subgraph they
    span, forming new segments. Only updated elements can change assignment.

    Returns (segmentation, changed_labels) where changed_labels contains
    every segment that gained or lost members, including new ones.
    """
    upd = np.asarray(sorted(set(int(u) for u in np.asarray(updated_elements).ravel())),
                     dtype=np.int64)
    if len(upd) == 0:
        return seg, set()
    if upd.min() < 0 or upd.max() >= len(smap):
        raise ValueError("unknown element id in update set")

    changed: set[int] = set()

    # detach updated elements from their previous segments
    prev = seg.assignment[upd]
    prev_labels = np.unique(prev[prev >= 0])
    changed.update(int(l) for l in prev_labels)
    seg.assignment[upd] = -1
    if len(prev_labels):
        seg.refresh_stats(touched_labels=prev_labels)

    # try association with existing segments
    pool = upd
    if seg.num_segments > 0:
        cand_labels, costs = _candidate_costs(smap, seg, upd,
                                              params.knn_candidates,
                                              params.normal_weight)
        best_label, best_cost = _argmin_with_ties(cand_labels, costs)
        adopt = best_cost <= params.association_threshold
        seg.assignment[upd[adopt]] = best_label[adopt]
        for l in np.unique(best_label[adopt]):
            changed.add(int(l))
        pool = upd[~adopt]

    # batch re-segmentation of the leftover pool over its own subgraph
    if len(pool):
        in_pool = np.zeros(len(smap), dtype=bool)
        in_pool[pool] = True
        local = np.full(len(smap), -1, dtype=np.int64)
        local[pool] = np.arange(len(pool))
        adj = smap.adjacency
        sub_mask = in_pool[adj[:, 0]] & in_pool[adj[:, 1]] if len(adj) else \
            np.zeros(0, dtype=bool)
        sub_edges = local[adj[sub_mask]] if len(adj) else np.empty((0, 2), np.int64)
        if smap.normals is not None and len(sub_edges):
            sub_graph = build_graph(
                SurfelMap(positions=smap.positions, adjacency=adj[sub_mask],
                          normals=smap.normals),
                concavity_threshold=params.concavity_threshold,
                concave_penalty=params.concave_penalty)
            sub_w = sub_graph.weights
        else:
            sub_w = np.zeros(len(sub_edges))
        raw = greedy_merge(len(pool), sub_edges, sub_w, params.expected_size)
        next_label = int(seg.labels.max()) + 1 if seg.num_segments else 0
        new_labels = _compact_labels(raw) + next_label
        seg.assignment[pool] = new_labels
        changed.update(int(l) for l in np.unique(new_labels))

    seg.refresh_stats(touched_labels=changed)

    # local refinement: only updated elements may move
    for _ in range(params.refine_rounds):
        if seg.num_segments == 0:
            break
        cand_labels, costs = _candidate_costs(smap, seg, upd,
                                              params.knn_candidates,
                                              params.normal_weight)
        cur_cost = _current_costs(smap, seg, upd, params.normal_weight)
        best_label, best_cost = _argmin_with_ties(cand_labels, costs)
        move = best_cost < cur_cost
        if not np.any(move):
            break
        round_touched = set(int(l) for l in np.unique(seg.assignment[upd[move]]))
        round_touched.update(int(l) for l in np.unique(best_label[move]))
        changed.update(round_touched)
        seg.assignment[upd[move]] = best_label[move]
        seg.refresh_stats(touched_labels=round_touched)

    return seg, changed
