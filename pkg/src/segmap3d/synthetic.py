"""Deterministic synthetic indoor scenes for tests, demos and benchmarks.

A scene is an axis-aligned box room with optional box-shaped objects on the
floor. The generator produces the voxelized surfel map with analytic
normals, per-element class labels and planar region ids, a circular camera
trajectory, ray-cast depth maps and per-pixel class probability maps with
configurable label noise. Everything is a pure function of the spec and its
seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import io as smio
from .fusion import CameraIntrinsics, Pose
from .geometry import SurfelMap, voxelize_points

# semantic classes used by generated scenes
CLASS_FLOOR = 0
CLASS_CEILING = 1
CLASS_WALL = 2
FIRST_OBJECT_CLASS = 3


@dataclass
class BoxObject:
    center_xy: tuple      # (x, y) center of footprint, meters
    size: tuple           # (sx, sy, sz) edge lengths, meters
    semantic_class: int = FIRST_OBJECT_CLASS


@dataclass
class SceneSpec:
    room_size: tuple = (4.0, 4.0, 2.5)   # (x, y, z) meters
    voxel_size: float = 0.02
    objects: list = field(default_factory=list)
    num_frames: int = 60
    camera_radius: float = 0.4
    camera_height: float = 1.3
    # pitch cycle spans nadir to zenith so an orbit covers floor and ceiling
    camera_pitch_cycle: tuple = (-1.1, -0.4, 0.2, 0.7, 1.25)
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(
        fx=200.0, fy=200.0, cx=160.0, cy=120.0, width=320, height=240))
    depth_noise: float = 0.0      # stddev of additive depth noise, meters
    label_noise: float = 0.0      # probability a pixel label is resampled
    label_confidence: float = 1.0  # probability mass on the emitted label
    seed: int = 0

    def __post_init__(self):
        if min(self.room_size) <= 0:
            raise ValueError("degenerate scene: room dimensions must be positive")
        if self.voxel_size <= 0:
            raise ValueError("degenerate scene: voxel size must be positive")
        # dimensions snap to the voxel grid so every voxel holds one class
        h = self.voxel_size
        self.room_size = tuple(max(round(d / h), 4) * h for d in self.room_size)
        snapped = []
        for obj in self.objects:
            snapped.append(BoxObject(
                center_xy=tuple(round(c / h) * h for c in obj.center_xy),
                size=tuple(max(round(s / h), 2) * h for s in obj.size),
                semantic_class=obj.semantic_class))
        self.objects = snapped

    @property
    def num_classes(self) -> int:
        base = FIRST_OBJECT_CLASS
        if self.objects:
            base = max(base, max(o.semantic_class for o in self.objects) + 1)
        return base


@dataclass
class SyntheticScene:
    spec: SceneSpec
    smap: SurfelMap
    gt_labels: np.ndarray    # (n,) semantic class per element
    gt_regions: np.ndarray   # (n,) planar region id per element
    poses: list              # camera-to-world Pose per frame
    timestamps: np.ndarray
    depths: list             # (H, W) float meters per frame
    prob_maps: list          # (H, W, C) float per frame
    pixel_labels: list       # (H, W) int per frame (post-noise)


# ---------------------------------------------------------------------------
# Geometry of the analytic scene: 6 room planes + object boxes
# ---------------------------------------------------------------------------

def _surfaces(spec: SceneSpec):
    """Rectangles: (region, class, origin, du, dv, normal, v_inset_rows).

    Each surface is origin + s*du + t*dv for s, t in [0, 1], with an inward
    facing normal (toward the room interior / away from object interiors).
    `v_inset_rows` skips that many voxel rows at both ends of the v axis
    when sampling, which keeps voxels at floor/ceiling creases class-pure:
    walls cede their boundary rows to the floor and ceiling.
    """
    W, L, H = spec.room_size
    out = []
    # room interior: floor, ceiling, four walls
    out.append(("floor", CLASS_FLOOR, np.array([0, 0, 0.0]),
                np.array([W, 0, 0.0]), np.array([0, L, 0.0]),
                np.array([0, 0, 1.0]), 0))
    out.append(("ceiling", CLASS_CEILING, np.array([0, 0, H]),
                np.array([W, 0, 0.0]), np.array([0, L, 0.0]),
                np.array([0, 0, -1.0]), 0))
    for name, origin, du in [
            ("wall_x0", np.array([0.0, 0, 0]), np.array([0, L, 0.0])),
            ("wall_x1", np.array([W, 0, 0.0]), np.array([0, L, 0.0])),
            ("wall_y0", np.array([0, 0.0, 0]), np.array([W, 0, 0.0])),
            ("wall_y1", np.array([0, L, 0.0]), np.array([W, 0, 0.0]))]:
        normal = {"wall_x0": [1.0, 0, 0], "wall_x1": [-1.0, 0, 0],
                  "wall_y0": [0, 1.0, 0], "wall_y1": [0, -1.0, 0]}[name]
        out.append((name, CLASS_WALL, origin, du, np.array([0, 0, H]),
                    np.array(normal), 1))
    for k, obj in enumerate(spec.objects):
        cx, cy = obj.center_xy
        sx, sy, sz = obj.size
        x0, x1 = cx - sx / 2, cx + sx / 2
        y0, y1 = cy - sy / 2, cy + sy / 2
        name = f"object{k}"
        c = obj.semantic_class
        out.append((f"{name}_top", c, np.array([x0, y0, sz]),
                    np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]),
                    np.array([0, 0, 1.0]), 0))
        out.append((f"{name}_x0", c, np.array([x0, y0, 0.0]),
                    np.array([0, sy, 0.0]), np.array([0, 0, sz]),
                    np.array([-1.0, 0, 0]), 0))
        out.append((f"{name}_x1", c, np.array([x1, y0, 0.0]),
                    np.array([0, sy, 0.0]), np.array([0, 0, sz]),
                    np.array([1.0, 0, 0]), 0))
        out.append((f"{name}_y0", c, np.array([x0, y0, 0.0]),
                    np.array([sx, 0, 0.0]), np.array([0, 0, sz]),
                    np.array([0, -1.0, 0]), 0))
        out.append((f"{name}_y1", c, np.array([x0, y1, 0.0]),
                    np.array([sx, 0, 0.0]), np.array([0, 0, sz]),
                    np.array([0, 1.0, 0]), 0))
    return out


def _object_footprints(spec: SceneSpec):
    rects = []
    for obj in spec.objects:
        cx, cy = obj.center_xy
        sx, sy, _ = obj.size
        rects.append((cx - sx / 2, cx + sx / 2, cy - sy / 2, cy + sy / 2))
    return rects


_PALETTE = np.array([
    [0.65, 0.55, 0.45],  # floor
    [0.85, 0.85, 0.80],  # ceiling
    [0.55, 0.70, 0.80],  # wall
    [0.80, 0.35, 0.30],
    [0.35, 0.65, 0.35],
    [0.70, 0.50, 0.75],
    [0.85, 0.70, 0.30],
    [0.40, 0.40, 0.70],
])


def class_color(c: int) -> np.ndarray:
    return _PALETTE[c % len(_PALETTE)]


def build_map(spec: SceneSpec):
    """Voxelized surfel map with analytic normals, labels and region ids."""
    h = spec.voxel_size
    surfaces = _surfaces(spec)
    footprints = _object_footprints(spec)
    pts, normals, labels, regions = [], [], [], []
    for region_id, (name, cls, origin, du, dv, nrm, v_inset) in enumerate(surfaces):
        lu, lv = np.linalg.norm(du), np.linalg.norm(dv)
        eu, ev = du / lu, dv / lv
        nu, nv = int(np.floor(lu / h)), int(np.floor(lv / h))
        su = (np.arange(nu) + 0.5) * h
        sv = (np.arange(v_inset, nv - v_inset) + 0.5) * h
        uu, vv = np.meshgrid(su, sv, indexing="ij")
        p = origin[None, :] + uu.reshape(-1, 1) * eu + vv.reshape(-1, 1) * ev
        if name == "floor" and footprints:
            keep = np.ones(len(p), dtype=bool)
            for (x0, x1, y0, y1) in footprints:
                keep &= ~((p[:, 0] > x0) & (p[:, 0] < x1)
                          & (p[:, 1] > y0) & (p[:, 1] < y1))
            p = p[keep]
        pts.append(p)
        normals.append(np.tile(nrm, (len(p), 1)))
        labels.append(np.full(len(p), cls, dtype=np.int64))
        regions.append(np.full(len(p), region_id, dtype=np.int64))
    pts = np.concatenate(pts)
    normals = np.concatenate(normals)
    labels = np.concatenate(labels)
    regions = np.concatenate(regions)
    colors = _PALETTE[labels % len(_PALETTE)]

    # piggyback the region id through the voxel majority vote by packing it
    # together with the class (region determines class)
    smap, cell_regions = voxelize_points(pts, h, colors=colors, normals=normals,
                                         labels=regions)
    region_class = np.array([s[1] for s in surfaces], dtype=np.int64)
    cell_labels = region_class[cell_regions]
    return smap, cell_labels, cell_regions


# ---------------------------------------------------------------------------
# Camera path and rendering
# ---------------------------------------------------------------------------

def _camera_poses(spec: SceneSpec):
    W, L, _ = spec.room_size
    center = np.array([W / 2, L / 2, spec.camera_height])
    poses = []
    pitches = spec.camera_pitch_cycle
    for f in range(spec.num_frames):
        yaw = 2.0 * np.pi * f / max(spec.num_frames, 1)
        pitch = pitches[f % len(pitches)]
        pos = center + spec.camera_radius * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        fwd = np.array([np.cos(yaw) * np.cos(pitch),
                        np.sin(yaw) * np.cos(pitch),
                        np.sin(pitch)])
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)  # camera-to-world
        poses.append(Pose(Rotation.from_matrix(R).as_quat(), pos))
    return poses


def render_frame(spec: SceneSpec, pose: Pose):
    """Analytic z-depth and per-pixel surface region for one camera pose."""
    intr = spec.intrinsics
    H, W = intr.height, intr.width
    u, v = np.meshgrid(np.arange(W, dtype=np.float64),
                       np.arange(H, dtype=np.float64))
    dirs = np.stack([(u - intr.cx) / intr.fx,
                     (v - intr.cy) / intr.fy,
                     np.ones_like(u)], axis=-1)       # z component 1: t = z-depth
    R, t = pose.matrix(), pose.translation
    dw = dirs @ R.T
    depth = np.full((H, W), np.inf)
    region = np.full((H, W), -1, dtype=np.int64)
    for region_id, (name, cls, origin, du, dv, nrm) in enumerate(_surfaces(spec)):
        lu, lv = np.linalg.norm(du), np.linalg.norm(dv)
        eu, ev = du / lu, dv / lv
        denom = dw @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = ((origin - t) @ nrm) / denom
        hit = (tt > 1e-6) & np.isfinite(tt)
        p = t[None, None, :] + tt[..., None] * dw
        su = (p - origin) @ eu
        sv = (p - origin) @ ev
        hit &= (su >= -1e-9) & (su <= lu + 1e-9) & (sv >= -1e-9) & (sv <= lv + 1e-9)
        closer = hit & (tt < depth)
        depth[closer] = tt[closer]
        region[closer] = region_id
    depth[~np.isfinite(depth)] = 0.0
    return depth, region


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Build the map, render every frame and synthesize probability maps."""
    rng = np.random.default_rng(spec.seed)
    smap, gt_labels, gt_regions = build_map(spec)
    poses = _camera_poses(spec)
    region_class = np.array([s[1] for s in _surfaces(spec)], dtype=np.int64)
    C = spec.num_classes

    depths, prob_maps, pixel_labels = [], [], []
    for pose in poses:
        depth, region = render_frame(spec, pose)
        labels = np.where(region >= 0, region_class[region], 0)
        if spec.label_noise > 0:
            flip = rng.random(labels.shape) < spec.label_noise
            labels = np.where(flip, rng.integers(0, C, size=labels.shape), labels)
        if spec.label_confidence >= 1.0:
            probs = np.zeros(labels.shape + (C,))
            np.put_along_axis(probs, labels[..., None], 1.0, axis=-1)
        else:
            rest = (1.0 - spec.label_confidence) / (C - 1)
            probs = np.full(labels.shape + (C,), rest)
            np.put_along_axis(probs, labels[..., None], spec.label_confidence,
                              axis=-1)
        if spec.depth_noise > 0:
            noisy = depth + rng.normal(0.0, spec.depth_noise, size=depth.shape)
            depth = np.where(depth > 0, np.maximum(noisy, 0.0), 0.0)
        depths.append(depth)
        prob_maps.append(probs)
        pixel_labels.append(labels)

    timestamps = np.arange(spec.num_frames, dtype=np.float64) / 30.0
    return SyntheticScene(spec=spec, smap=smap, gt_labels=gt_labels,
                          gt_regions=gt_regions, poses=poses,
                          timestamps=timestamps, depths=depths,
                          prob_maps=prob_maps, pixel_labels=pixel_labels)


# ---------------------------------------------------------------------------
# Export in the pipeline's external formats
# ---------------------------------------------------------------------------

def write_scene(scene: SyntheticScene, out_dir: str | Path) -> dict:
    """Write map, ground truth, trajectory, depth and probability files.

    Returns a manifest dict (also saved as scene.json) whose paths are
    relative to `out_dir`.
    """
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    (out / "probs").mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    intr = spec.intrinsics

    smap = scene.smap
    vertex = {
        "x": smap.positions[:, 0].astype(np.float32),
        "y": smap.positions[:, 1].astype(np.float32),
        "z": smap.positions[:, 2].astype(np.float32),
        "nx": smap.normals[:, 0].astype(np.float32),
        "ny": smap.normals[:, 1].astype(np.float32),
        "nz": smap.normals[:, 2].astype(np.float32),
        "red": (smap.colors[:, 0] * 255).round().astype(np.uint8),
        "green": (smap.colors[:, 1] * 255).round().astype(np.uint8),
        "blue": (smap.colors[:, 2] * 255).round().astype(np.uint8),
        "label": scene.gt_labels.astype(np.uint16),
    }
    smio.write_ply(out / "map.ply", vertex, binary=True)
    region_vertex = dict(vertex)
    region_vertex["label"] = scene.gt_regions.astype(np.uint16)
    smio.write_ply(out / "regions.ply", region_vertex, binary=True)

    smio.write_trajectory(out / "trajectory.txt", scene.timestamps,
                          [p.translation for p in scene.poses],
                          [p.rotation for p in scene.poses])
    for f, (depth, probs) in enumerate(zip(scene.depths, scene.prob_maps)):
        smio.write_depth(out / "depth" / f"{f:06d}.png", depth, intr.depth_scale)
        smio.write_tensor(out / "probs" / f"{f:06d}.smpt", probs)

    manifest = {
        "map_ply": "map.ply",
        "regions_ply": "regions.ply",
        "trajectory": "trajectory.txt",
        "depth_dir": "depth",
        "prob_dir": "probs",
        "voxel_size": spec.voxel_size,
        "num_classes": spec.num_classes,
        "num_frames": spec.num_frames,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx,
                       "cy": intr.cy, "width": intr.width,
                       "height": intr.height, "depth_scale": intr.depth_scale},
        "seed": spec.seed,
        "label_noise": spec.label_noise,
        "depth_noise": spec.depth_noise,
    }
    with open(out / "scene.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# Small analytic meshes for unit tests and demos
# ---------------------------------------------------------------------------

def box_mesh(size=(1.0, 1.0, 1.0)):
    """Axis-aligned box as (vertices (8, 3), triangles (12, 3))."""
    sx, sy, sz = size
    v = np.array([[x, y, z] for x in (0, sx) for y in (0, sy) for z in (0, sz)],
                 dtype=np.float64)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
             (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    return v, np.array(tris, dtype=np.int64)


def icosphere(subdivisions: int = 3, radius: float = 1.0):
    """Subdivided icosahedron as (vertices, triangles); vertices on the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []
        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (np.array(verts[i]) + np.array(verts[j])) / 2.0
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius
    return v, np.array(faces, dtype=np.int64)
