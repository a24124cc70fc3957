"""Lifting posed 2D observations into the 3D map.

Covers the inference-side geometry of multi-view fusion: warping posed,
depth-backed feature grids into a reference view, average-pool fusion of
warped views, projecting per-pixel class probabilities onto map elements
with occlusion and facing tests, and multiplicative Bayesian accumulation of
per-element class posteriors. No gradients flow through any of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Segmentation, SurfelMap

PROB_FLOOR = 1e-4


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform as unit quaternion + translation."""

    rotation: np.ndarray     # (4,) quaternion, (x, y, z, w)
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm:.9f} is not 1")
        object.__setattr__(self, "rotation", q / norm)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(Rotation.from_matrix(R).as_quat(), np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera model plus the scale of stored depth values."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1e-3  # meters per stored depth unit

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class FeatureMap:
    """A posed multi-channel 2D grid with an accompanying depth map.

    The grid is sampled at `stride` relative to the full-resolution image the
    depth map lives in: grid dims equal ceil(image dims / stride). Depth is
    in meters; zero marks invalid pixels.
    """

    grid: np.ndarray   # (h, w, c)
    stride: int
    depth: np.ndarray  # (H, W) full resolution, meters, 0 = invalid
    pose: Pose

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise ValueError("grid must be (h, w, channels)")
        H, W = self.depth.shape
        h = -(-H // self.stride)
        w = -(-W // self.stride)
        if self.grid.shape[:2] != (h, w):
            raise ValueError(
                f"grid {self.grid.shape[:2]} does not match "
                f"ceil(({H}, {W}) / {self.stride}) = {(h, w)}")

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


def warp_feature_map(src: FeatureMap, tgt_pose: Pose, intr: CameraIntrinsics):
    """Re-project a feature grid from its own view into a target view.

    Every source cell with valid depth is unprojected through the pinhole
    model, moved into the target camera frame and splatted onto the nearest
    target cell at the same stride; depth conflicts resolve by z-buffer
    (nearest wins). Returns (warped FeatureMap, validity mask) where the mask
    marks cells that received at least one splat.
    """
    s = src.stride
    h, w, c = src.grid.shape
    # full-resolution pixel of cell (i, j) is its top-left sample (i*s, j*s)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = (jj * s).astype(np.float64)
    v = (ii * s).astype(np.float64)
    z = src.depth[::s, ::s][:h, :w].astype(np.float64)
    valid = z > 0

    x = (u - intr.cx) / intr.fx * z
    y = (v - intr.cy) / intr.fy * z
    pts_cam = np.stack([x, y, z], axis=-1)[valid]
    feats = src.grid[valid]

    R_src, t_src = src.pose.matrix(), src.pose.translation
    R_tgt, t_tgt = tgt_pose.matrix(), tgt_pose.translation
    pts_world = pts_cam @ R_src.T + t_src
    pts_tgt = (pts_world - t_tgt) @ R_tgt

    warped = np.zeros_like(src.grid)
    mask = np.zeros((h, w), dtype=bool)
    zbuf = np.full((h, w), np.inf)

    zt = pts_tgt[:, 2]
    front = zt > 0
    pts_tgt, feats, zt = pts_tgt[front], feats[front], zt[front]
    ut = intr.fx * pts_tgt[:, 0] / zt + intr.cx
    vt = intr.fy * pts_tgt[:, 1] / zt + intr.cy
    cj = np.rint(ut / s).astype(np.int64)
    ci = np.rint(vt / s).astype(np.int64)
    inb = (ci >= 0) & (ci < h) & (cj >= 0) & (cj < w)
    ci, cj, feats, zt = ci[inb], cj[inb], feats[inb], zt[inb]

    # z-buffer: process far-to-near so the nearest splat lands last
    order = np.argsort(-zt, kind="stable")
    ci, cj, feats, zt = ci[order], cj[order], feats[order], zt[order]
    warped[ci, cj] = feats
    zbuf[ci, cj] = zt
    mask[ci, cj] = True

    depth_out = np.zeros_like(src.depth)
    zfull = np.where(mask, zbuf, 0.0)
    depth_out[:, :] = np.repeat(np.repeat(zfull, s, axis=0), s, axis=1)[
        :src.depth.shape[0], :src.depth.shape[1]]
    out = FeatureMap(grid=warped, stride=s, depth=depth_out, pose=tgt_pose)
    return out, mask


def fuse_views(reference: FeatureMap, warped: list[FeatureMap],
               masks: list[np.ndarray]) -> FeatureMap:
    """Average the reference grid with warped views where they are valid."""
    acc = reference.grid.astype(np.float64).copy()
    count = np.ones(reference.grid.shape[:2])
    for fm, mask in zip(warped, masks):
        if fm.stride != reference.stride:
            raise ValueError("stride mismatch between fused views")
        if fm.channels != reference.channels:
            raise ValueError("channel mismatch between fused views")
        acc[mask] += fm.grid[mask]
        count[mask] += 1
    fused = acc / count[:, :, None]
    return FeatureMap(grid=fused.astype(reference.grid.dtype),
                      stride=reference.stride, depth=reference.depth,
                      pose=reference.pose)


def default_depth_tolerance(depth: np.ndarray) -> np.ndarray:
    """Depth agreement gate: max(5 cm, 2% of the observed depth)."""
    return np.maximum(0.05, 0.02 * depth)


def project_observations(prob_map: np.ndarray, depth: np.ndarray, pose: Pose,
                         intr: CameraIntrinsics, smap: SurfelMap,
                         depth_tolerance=default_depth_tolerance):
    """Project map elements into a frame and collect per-pixel class vectors.

    An element receives the probability vector of its nearest pixel iff it
    projects in bounds with positive depth, its projected depth agrees with
    the depth map within the tolerance, and it faces the camera. Returns
    (element_ids, vectors); both empty when nothing is visible.
    """
    H, W, C = prob_map.shape
    if depth.shape != (H, W):
        raise ValueError("probability map and depth map shapes differ")
    row_sums = prob_map.reshape(-1, C).sum(axis=1)
    if len(row_sums) and np.abs(row_sums - 1.0).max() > 1e-4:
        raise ValueError("probability map rows must sum to 1")

    R, t = pose.matrix(), pose.translation
    pts_cam = (smap.positions - t) @ R
    z = pts_cam[:, 2]
    ok = z > 0
    u = np.full(len(smap.positions), -1.0)
    v = np.full(len(smap.positions), -1.0)
    u[ok] = intr.fx * pts_cam[ok, 0] / z[ok] + intr.cx
    v[ok] = intr.fy * pts_cam[ok, 1] / z[ok] + intr.cy
    px = np.rint(u).astype(np.int64)
    py = np.rint(v).astype(np.int64)
    ok &= (px >= 0) & (px < W) & (py >= 0) & (py < H)

    ids = np.nonzero(ok)[0]
    dmap = depth[py[ids], px[ids]]
    proj = z[ids]
    tol = depth_tolerance(dmap)
    ok2 = (dmap > 0) & (np.abs(proj - dmap) <= tol)
    if smap.normals is not None:
        to_cam = t[None, :] - smap.positions[ids]
        ok2 &= np.einsum("ni,ni->n", to_cam, smap.normals[ids]) > 0
    ids = ids[ok2]
    vectors = prob_map[py[ids], px[ids]].astype(np.float64)
    return ids, vectors


@dataclass
class ClassPosterior:
    """Per-element class probabilities accumulated by Bayesian fusion."""

    probs: np.ndarray   # (n, C), rows sum to 1
    counts: np.ndarray  # (n,) observations so far
    prob_floor: float = PROB_FLOOR

    @classmethod
    def uniform(cls, num_elements: int, num_classes: int,
                prob_floor: float = PROB_FLOOR) -> "ClassPosterior":
        return cls(np.full((num_elements, num_classes), 1.0 / num_classes),
                   np.zeros(num_elements, dtype=np.int64), prob_floor)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def update(self, element_ids: np.ndarray, vectors: np.ndarray) -> None:
        """Multiply observations into the stored posteriors and renormalize.

        Observations are floored at `prob_floor` before the product so no
        class is ever locked out by a zero.
        """
        ids = np.asarray(element_ids, dtype=np.int64)
        if len(ids) == 0:
            return
        raw = np.asarray(vectors, dtype=np.float64)
        if raw.shape != (len(ids), self.num_classes):
            raise ValueError("observation array shape mismatch")
        if raw.min() < 0:
            raise ValueError("negative observation probability")
        obs = np.maximum(raw, self.prob_floor)
        post = self.probs[ids] * obs
        post /= post.sum(axis=1, keepdims=True)
        self.probs[ids] = post
        self.counts[ids] += 1

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def pool_segment_posteriors(posterior: ClassPosterior, seg: Segmentation,
                            labels=None):
    """Mean member posterior per segment, renormalized.

    Returns (labels, (L, C) matrix) aligned with `labels` (all segments by
    default, in label-sorted order).
    """
    if labels is None:
        labels = seg.labels
    labels = np.unique(np.asarray(labels, dtype=np.int64))
    want = np.isin(seg.assignment, labels)
    ids = np.nonzero(want)[0]
    rows_all = np.searchsorted(labels, seg.assignment[ids])
    acc = np.zeros((len(labels), posterior.num_classes))
    np.add.at(acc, rows_all, posterior.probs[ids])
    counts = np.bincount(rows_all, minlength=len(labels)).astype(np.float64)
    empty = counts == 0
    counts[empty] = 1.0
    pooled = acc / counts[:, None]
    pooled[empty] = 1.0 / posterior.num_classes
    pooled /= pooled.sum(axis=1, keepdims=True)
    return labels, pooled
