"""Surfel map representation and the geometric groundwork for segmentation:
map loading/voxelization, PCA normal estimation with consistent orientation,
weighted adjacency graphs, per-segment statistics and segment-center
nearest-neighbor queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from . import io as smio

COV_FLOOR = 1e-6  # m^2, keeps segment covariances invertible


class EmptyMapError(ValueError):
    """Input produced a map with no elements."""


class DegenerateGeometryError(ValueError):
    """Too few elements for the requested geometric operation."""


@dataclass
class SurfelMap:
    """Surface elements of a 3D map: voxel centers or mesh vertices.

    Attributes
    ----------
    positions : (n, 3) float64, meters.
    adjacency : (e, 2) int64, unique undirected edges with i < j.
    normals : (n, 3) float64 unit vectors, or None until estimated.
    colors : (n, 3) float64 RGB in [0, 1], or None.
    element_kind : "voxel" or "vertex".
    voxel_size : cell edge in meters (voxel kind only).
    """

    positions: np.ndarray
    adjacency: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    element_kind: str = "vertex"
    voxel_size: float | None = None
    _neighbor_cache: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.positions)

    def neighbor_lists(self):
        """CSR-style (offsets, neighbors) over the symmetric adjacency."""
        if self._neighbor_cache is None:
            n = len(self)
            if len(self.adjacency):
                src = np.concatenate([self.adjacency[:, 0], self.adjacency[:, 1]])
                dst = np.concatenate([self.adjacency[:, 1], self.adjacency[:, 0]])
                order = np.argsort(src, kind="stable")
                src, dst = src[order], dst[order]
                offsets = np.zeros(n + 1, dtype=np.int64)
                np.add.at(offsets, src + 1, 1)
                np.cumsum(offsets, out=offsets)
            else:
                offsets = np.zeros(n + 1, dtype=np.int64)
                dst = np.empty(0, dtype=np.int64)
            self._neighbor_cache = (offsets, dst)
        return self._neighbor_cache


@dataclass
class WeightedGraph:
    """Undirected weighted graph over map elements; one row per map edge."""

    edges: np.ndarray   # (e, 2) int64, i < j
    weights: np.ndarray  # (e,) float64, finite and >= 0


@dataclass
class SegmentStats:
    """First- and second-order statistics of one segment."""

    center: np.ndarray      # (3,) mean member position
    covariance: np.ndarray  # (3, 3) member position covariance + floor
    normal: np.ndarray      # (3,) unit mean of sign-aligned member normals
    size: int


def _canonical_edges(edges: np.ndarray) -> np.ndarray:
    """Unique undirected edges as (e, 2) with i < j, self-loops dropped."""
    if len(edges) == 0:
        return np.empty((0, 2), dtype=np.int64)
    e = np.asarray(edges, dtype=np.int64)
    e = np.stack([e.min(axis=1), e.max(axis=1)], axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def voxelize_points(points: np.ndarray, voxel_size: float,
                    colors: np.ndarray | None = None,
                    normals: np.ndarray | None = None,
                    labels: np.ndarray | None = None):
    """Snap points to a voxel grid and build face adjacency.

    Points are snapped to the centers of their cells; several points in one
    cell collapse to a single element whose color/normal is the average and
    whose label (if given) is the majority, ties to the smallest label.

    Returns (SurfelMap, cell_labels or None).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyMapError("no points to voxelize")
    if not voxel_size or voxel_size <= 0:
        raise ValueError("voxel_size must be positive")

    idx = np.floor(pts / voxel_size).astype(np.int64)
    cells, inverse = np.unique(idx, axis=0, return_inverse=True)
    n = len(cells)
    centers = (cells.astype(np.float64) + 0.5) * voxel_size

    def cell_mean(values, dim):
        acc = np.zeros((n, dim))
        np.add.at(acc, inverse, np.asarray(values, dtype=np.float64).reshape(-1, dim))
        counts = np.bincount(inverse, minlength=n).astype(np.float64)
        return acc / counts[:, None]

    mean_colors = cell_mean(colors, 3) if colors is not None else None
    mean_normals = None
    if normals is not None:
        mean_normals = cell_mean(normals, 3)
        norms = np.linalg.norm(mean_normals, axis=1, keepdims=True)
        norms[norms < 1e-12] = 1.0
        mean_normals /= norms

    cell_labels = None
    if labels is not None:
        lab = np.asarray(labels, dtype=np.int64)
        # majority vote per cell, ties to the smallest label
        pair = np.stack([inverse, lab], axis=1)
        uniq, counts = np.unique(pair, axis=0, return_counts=True)
        order = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
        uniq, counts = uniq[order], counts[order]
        first = np.unique(uniq[:, 0], return_index=True)[1]
        cell_labels = np.full(n, -1, dtype=np.int64)
        cell_labels[uniq[first, 0]] = uniq[first, 1]

    # face adjacency: cells whose integer coordinates differ by one step
    # along exactly one axis; cells are keyed by a collision-free scalar
    lo = cells.min(axis=0)
    span = cells.max(axis=0) - lo + 2  # +2 so probing +1 never wraps
    strides = np.array([span[1] * span[2], span[2], 1], dtype=np.int64)
    keys = (cells - lo) @ strides
    order = np.argsort(keys)
    sorted_keys = keys[order]
    edges = []
    for axis in range(3):
        probe = keys + strides[axis]
        pos = np.searchsorted(sorted_keys, probe)
        pos = np.clip(pos, 0, n - 1)
        hit = sorted_keys[pos] == probe
        src = np.nonzero(hit)[0]
        dst = order[pos[hit]]
        edges.append(np.stack([src, dst], axis=1))
    adjacency = _canonical_edges(np.concatenate(edges, axis=0))

    smap = SurfelMap(positions=centers, adjacency=adjacency, colors=mean_colors,
                     normals=mean_normals, element_kind="voxel", voxel_size=voxel_size)
    return smap, cell_labels


def surfel_map_from_ply(ply: smio.PlyData, voxel_size: float | None = None):
    """Build a SurfelMap from parsed PLY data.

    With faces present the vertices become the elements and the mesh edge set
    becomes the adjacency (duplicate vertex positions are merged). Without
    faces the vertices are treated as a point set and voxelized, which
    requires `voxel_size`.

    Returns (SurfelMap, labels or None) where labels come from an optional
    per-vertex 'label' property.
    """
    v = ply.vertex
    for key in ("x", "y", "z"):
        if key not in v:
            raise smio.PlyError(f"vertex element lacks required property '{key}'")
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if len(pts) == 0:
        raise EmptyMapError("PLY file has no vertices")
    normals = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        norms[norms < 1e-12] = 1.0
        normals = normals / norms
    colors = None
    if all(k in v for k in ("red", "green", "blue")):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    labels = v["label"].astype(np.int64) if "label" in v else None

    if ply.faces:
        # merge exact duplicate positions, remapping faces
        uniq, pick, remap = np.unique(pts, axis=0, return_index=True,
                                      return_inverse=True)
        edges = []
        for f in ply.faces:
            fr = remap[f]
            edges.append(np.stack([fr, np.roll(fr, -1)], axis=1))
        adjacency = _canonical_edges(np.concatenate(edges, axis=0))
        smap = SurfelMap(
            positions=uniq,
            adjacency=adjacency,
            normals=None if normals is None else normals[pick],
            colors=None if colors is None else colors[pick],
            element_kind="vertex")
        return smap, (None if labels is None else labels[pick])

    if voxel_size is None:
        raise ValueError("point-set PLY input requires voxel_size")
    return voxelize_points(pts, voxel_size, colors=colors, normals=normals, labels=labels)


def load_surfel_map(source, voxel_size: float | None = None) -> SurfelMap:
    """Load a SurfelMap from a PLY file path or an (n, 3) point array.

    Mesh files (with faces) keep their vertices and edge set; point sets are
    voxelized at `voxel_size`.
    """
    if isinstance(source, (str, Path)):
        ply = smio.read_ply(source)
        smap, _ = surfel_map_from_ply(ply, voxel_size=voxel_size)
        return smap
    pts = np.asarray(source, dtype=np.float64)
    if pts.size == 0:
        raise EmptyMapError("empty point set")
    smap, _ = voxelize_points(pts, voxel_size)
    return smap


def estimate_normals(smap: SurfelMap, k: int = 16,
                     viewpoint: np.ndarray | None = None) -> SurfelMap:
    """Estimate unit normals from k-nearest-neighbor position covariance.

    The normal of each element is the eigenvector of the smallest eigenvalue
    of its k-neighborhood covariance. Orientation: toward `viewpoint` when
    given (a single 3-vector or one per element), otherwise by consistent
    propagation along a minimum spanning tree of the neighborhood graph.

    `k = 0` is a pass-through sentinel for maps that already carry normals.
    """
    if k == 0:
        if smap.normals is None:
            raise ValueError("k = 0 requires preexisting normals")
        return smap
    if k < 3:
        raise ValueError("k must be 0 or >= 3")
    n = len(smap)
    if n < 3:
        raise DegenerateGeometryError("need at least 3 elements to estimate normals")

    kk = min(k, n)
    tree = cKDTree(smap.positions)
    _, nbr = tree.query(smap.positions, k=kk)
    nbr = nbr.reshape(n, kk)
    hood = smap.positions[nbr]                      # (n, k, 3)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                         # smallest eigenvalue first
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    if viewpoint is not None:
        vp = np.asarray(viewpoint, dtype=np.float64)
        to_cam = vp - smap.positions if vp.ndim == 2 else vp[None, :] - smap.positions
        flip = np.einsum("ni,ni->n", to_cam, normals) < 0
        normals[flip] *= -1
    else:
        normals = _orient_by_propagation(smap, normals, nbr)

    smap.normals = normals
    return smap


def _orient_by_propagation(smap, normals, knn_neighbors):
    """Flip normals to a consistent field via an MST of adjacency + kNN edges.

    Roots are oriented away from their component centroid, which points
    closed surfaces outward; the sign then propagates breadth-first with a
    smoothness weight of 1 - |n_i . n_j|.
    """
    n = len(smap)
    src = np.repeat(np.arange(n), knn_neighbors.shape[1] - 1)
    dst = knn_neighbors[:, 1:].ravel()
    edges = np.concatenate([np.stack([src, dst], axis=1), smap.adjacency], axis=0) \
        if len(smap.adjacency) else np.stack([src, dst], axis=1)
    edges = _canonical_edges(edges)
    w = 1.0 - np.abs(np.einsum("ei,ei->e", normals[edges[:, 0]], normals[edges[:, 1]]))
    graph = coo_matrix((w + 1e-9, (edges[:, 0], edges[:, 1])), shape=(n, n))
    mst = minimum_spanning_tree(graph)
    mst = mst + mst.T

    ncomp, comp = connected_components(mst, directed=False)
    oriented = normals.copy()
    for c in range(ncomp):
        members = np.nonzero(comp == c)[0]
        root = members[0]
        centroid = smap.positions[members].mean(axis=0)
        outward = smap.positions[root] - centroid
        if np.dot(outward, oriented[root]) < 0:
            oriented[root] *= -1
        order, pred = breadth_first_order(mst, root, directed=False,
                                          return_predecessors=True)
        for node in order[1:]:
            if np.dot(oriented[node], oriented[pred[node]]) < 0:
                oriented[node] *= -1
    return oriented


def build_graph(smap: SurfelMap, concavity_threshold: float = 1e-3,
                concave_penalty: float = 5.0) -> WeightedGraph:
    """Weight each adjacency edge by normal deviation, penalizing concavity.

    w(i, j) = (1 - n_i . n_j) * gamma, where gamma = `concave_penalty` if the
    pair is concave under (p_j - p_i) . n_i > `concavity_threshold` (tested
    symmetrically so the undirected weight is well defined) and 1 otherwise.
    """
    if smap.normals is None:
        raise ValueError("normals must be estimated before building the graph")
    e = smap.adjacency
    if len(e) == 0:
        return WeightedGraph(edges=e.copy(), weights=np.empty(0))
    ni, nj = smap.normals[e[:, 0]], smap.normals[e[:, 1]]
    pi, pj = smap.positions[e[:, 0]], smap.positions[e[:, 1]]
    dot = np.einsum("ei,ei->e", ni, nj)
    d = pj - pi
    concave = (np.einsum("ei,ei->e", d, ni) > concavity_threshold) \
        | (np.einsum("ei,ei->e", -d, nj) > concavity_threshold)
    gamma = np.where(concave, concave_penalty, 1.0)
    w = np.clip(1.0 - dot, 0.0, None) * gamma
    return WeightedGraph(edges=e.copy(), weights=w)


def compute_segment_stats(smap: SurfelMap, assignment: np.ndarray,
                          cov_floor: float = COV_FLOOR) -> dict[int, SegmentStats]:
    """Per-segment center, floored covariance and mean normal.

    Elements assigned -1 are ignored. Covariances are population covariances
    of member positions plus `cov_floor` on the diagonal; normals are the
    normalized mean of member normals after sign alignment to the first
    member.
    """
    labels, centers, covs, normals, sizes = _stats_arrays(smap, assignment, cov_floor)
    return {int(l): SegmentStats(centers[i], covs[i], normals[i], int(sizes[i]))
            for i, l in enumerate(labels)}


def _stats_arrays(smap: SurfelMap, assignment: np.ndarray, cov_floor: float):
    mask = assignment >= 0
    ids = np.nonzero(mask)[0]
    if len(ids) == 0:
        empty3 = np.empty((0, 3))
        return (np.empty(0, np.int64), empty3, np.empty((0, 3, 3)), empty3,
                np.empty(0, np.int64))
    labels, rows = np.unique(assignment[ids], return_inverse=True)
    L = len(labels)
    pos = smap.positions[ids]
    sizes = np.bincount(rows, minlength=L)

    centers = np.zeros((L, 3))
    np.add.at(centers, rows, pos)
    centers /= sizes[:, None]

    dev = pos - centers[rows]
    covs = np.zeros((L, 3, 3))
    np.add.at(covs, rows, np.einsum("ni,nj->nij", dev, dev))
    covs /= sizes[:, None, None]
    covs[:, np.arange(3), np.arange(3)] += cov_floor
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))

    if smap.normals is not None:
        elem_normals = smap.normals[ids]
        first = np.zeros(L, dtype=np.int64)
        first[rows[::-1]] = np.arange(len(rows))[::-1]  # first occurrence per row label
        ref = elem_normals[first]
        sign = np.where(np.einsum("ni,ni->n", elem_normals, ref[rows]) < 0, -1.0, 1.0)
        normals = np.zeros((L, 3))
        np.add.at(normals, rows, elem_normals * sign[:, None])
        norms = np.linalg.norm(normals, axis=1)
        degen = norms < 1e-12
        normals[degen] = ref[degen]
        normals[~degen] /= norms[~degen, None]
    else:
        normals = np.tile(np.array([0.0, 0.0, 1.0]), (L, 1))
    return labels, centers, covs, normals, sizes


class Segmentation:
    """Element-to-segment assignment plus per-segment statistics.

    `assignment[i]` is the segment label of element i, or -1 for elements not
    yet covered (incremental construction). Statistics are stored densely in
    label-sorted arrays; `stats` exposes them as a mapping for lookups.
    """

    def __init__(self, smap: SurfelMap, assignment: np.ndarray,
                 cov_floor: float = COV_FLOOR):
        self.smap = smap
        self.assignment = np.asarray(assignment, dtype=np.int64).copy()
        self.cov_floor = cov_floor
        self._rebuild_all()

    def _rebuild_all(self):
        (self.labels, self.centers, self.covariances,
         self.normals, self.sizes) = _stats_arrays(self.smap, self.assignment,
                                                   self.cov_floor)
        self._row_of = {int(l): i for i, l in enumerate(self.labels)}
        self._kdtree = None
        self._inv_cov = None

    def refresh_stats(self, touched_labels=None):
        """Recompute stats; with `touched_labels` only those rows are redone.

        Touched labels may be brand new (rows are appended), changed (rows
        are overwritten) or emptied (rows are dropped). Labels stay sorted.
        """
        if touched_labels is None:
            self._rebuild_all()
            return
        touched = np.unique(np.asarray(list(touched_labels), dtype=np.int64))
        if len(touched) == 0:
            return
        sub_mask = np.isin(self.assignment, touched)
        sub_assign = np.where(sub_mask, self.assignment, -1)
        labels, centers, covs, normals, sizes = _stats_arrays(
            self.smap, sub_assign, self.cov_floor)
        keep = ~np.isin(self.labels, touched)
        self.labels = np.concatenate([self.labels[keep], labels])
        self.centers = np.concatenate([self.centers[keep], centers])
        self.covariances = np.concatenate([self.covariances[keep], covs])
        self.normals = np.concatenate([self.normals[keep], normals])
        self.sizes = np.concatenate([self.sizes[keep], sizes])
        order = np.argsort(self.labels)
        self.labels = self.labels[order]
        self.centers = self.centers[order]
        self.covariances = self.covariances[order]
        self.normals = self.normals[order]
        self.sizes = self.sizes[order]
        self._row_of = {int(l): i for i, l in enumerate(self.labels)}
        self._kdtree = None
        self._inv_cov = None

    def rows_of(self, labels: np.ndarray) -> np.ndarray:
        """Vectorized label -> row lookup (labels are kept sorted)."""
        return np.searchsorted(self.labels, labels)

    # -- queries ------------------------------------------------------------

    @property
    def num_segments(self) -> int:
        return len(self.labels)

    @property
    def stats(self) -> dict[int, SegmentStats]:
        return {int(l): SegmentStats(self.centers[i], self.covariances[i],
                                     self.normals[i], int(self.sizes[i]))
                for i, l in enumerate(self.labels)}

    def kdtree(self) -> cKDTree:
        if self._kdtree is None:
            if self.num_segments == 0:
                raise EmptyMapError("segmentation has no segments to index")
            self._kdtree = cKDTree(self.centers)
        return self._kdtree

    def inverse_covariances(self) -> np.ndarray:
        if self._inv_cov is None:
            self._inv_cov = np.linalg.inv(self.covariances)
        return self._inv_cov

    def copy(self) -> "Segmentation":
        return Segmentation(self.smap, self.assignment, self.cov_floor)


def knn_segments(segmentation: Segmentation, query: np.ndarray, k: int) -> np.ndarray:
    """Labels of the k segments with the nearest centers, closest first.

    Ties in distance break toward the smaller label so the ordering is total;
    if fewer than k segments exist, all of them are returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if segmentation.num_segments == 0:
        raise EmptyMapError("segmentation has no segments to index")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    kk = min(k, segmentation.num_segments)
    dist, rows = segmentation.kdtree().query(q, k=kk)
    rows = np.atleast_1d(rows)
    dist = np.atleast_1d(dist)
    labels = segmentation.labels[rows]
    order = np.lexsort((labels, dist))
    return labels[order]
