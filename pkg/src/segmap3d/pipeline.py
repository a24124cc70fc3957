"""End-to-end driver: frames -> posterior fusion -> incremental
over-segmentation -> segment-network refinement -> labeled map + metrics.

Configuration comes from a flat `key = value` text file (see README for the
key reference); it is the single source of truth, nothing is overridden by
environment variables. All outputs are written atomically.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as smio
from .fusion import (CameraIntrinsics, ClassPosterior, Pose,
                     pool_segment_posteriors, project_observations)
from .geometry import (Segmentation, SurfelMap, build_graph, estimate_normals,
                       surfel_map_from_ply)
from .metrics import (oversegmentation_error, segment_size_stats,
                      semantic_metrics, undersegmentation_error)
from .overseg import OversegParams, integrate_updates, segment_map, size_cost
from .segconv import (SegConvConfig, SegConvWeights, build_scene, infer,
                      load_weights, softmax)


class ConfigError(ValueError):
    """Bad or inconsistent pipeline configuration."""


def parse_config_text(path: str | Path) -> dict:
    """Parse a flat `key = value` file; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {ln}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _as_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: '{s}'")


@dataclass
class PipelineConfig:
    """Typed view of the configuration file."""

    # paths (resolved relative to the config file's directory)
    map_ply: Path | None = None
    regions_ply: Path | None = None
    trajectory: Path | None = None
    depth_dir: Path | None = None
    prob_dir: Path | None = None
    weights_file: Path | None = None
    segmentation_ply: Path | None = None
    posterior_file: Path | None = None
    pred_ply: Path | None = None
    gt_ply: Path | None = None
    out_dir: Path = Path("out")

    # camera
    intrinsics: CameraIntrinsics | None = None

    # map construction
    voxel_size: float | None = None
    normals_k: int = 0            # 0 = keep normals from the map file
    num_classes: int = 6

    # over-segmentation
    overseg: OversegParams = field(default_factory=OversegParams)
    concavity_threshold: float = 1e-3
    concave_penalty: float = 5.0

    # fusion
    prob_floor: float = 1e-4
    depth_tol_abs: float = 0.05
    depth_tol_rel: float = 0.02

    # segment network
    segconv_enabled: bool = True
    segconv_k: int = 64
    layer_widths: tuple = (32, 32, 32)
    weight_hidden: int = 8
    feature_hidden: int = 64
    segment_prior_floor: float = 1e-2

    # schedule
    keyframe_stride: int = 20
    seed: int = 0

    # synth / bench extras (kept verbatim for those subcommands)
    raw: dict = field(default_factory=dict)

    def segconv_config(self) -> SegConvConfig:
        return SegConvConfig(num_classes=self.num_classes,
                             k_neighbors=self.segconv_k,
                             layer_widths=self.layer_widths,
                             weight_hidden=self.weight_hidden,
                             feature_hidden=self.feature_hidden)

    def depth_tolerance(self, depth):
        return np.maximum(self.depth_tol_abs, self.depth_tol_rel * depth)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        kv = parse_config_text(path)
        base = path.parent
        cfg = cls(raw=dict(kv))

        def take(key, conv=str, default=None):
            if key in kv:
                try:
                    return conv(kv.pop(key))
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"key '{key}': {exc}") from exc
            return default

        for key in ("map_ply", "regions_ply", "trajectory", "depth_dir",
                    "prob_dir", "weights_file", "segmentation_ply",
                    "posterior_file", "pred_ply", "gt_ply"):
            val = take(key)
            if val is not None:
                p = base / val
                if not p.exists():
                    raise ConfigError(f"key '{key}': path does not exist: {p}")
                setattr(cfg, key, p)
        cfg.out_dir = base / take("out_dir", str, "out")

        if any(k in kv for k in ("fx", "fy", "cx", "cy", "width", "height")):
            try:
                cfg.intrinsics = CameraIntrinsics(
                    fx=take("fx", float), fy=take("fy", float),
                    cx=take("cx", float), cy=take("cy", float),
                    width=take("width", int), height=take("height", int),
                    depth_scale=take("depth_scale", float, 1e-3))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad intrinsics: {exc}") from exc

        cfg.voxel_size = take("voxel_size", float, cfg.voxel_size)
        cfg.normals_k = take("normals_k", int, cfg.normals_k)
        cfg.num_classes = take("num_classes", int, cfg.num_classes)
        try:
            cfg.overseg = OversegParams(
                expected_size=take("expected_size", int, 60),
                normal_weight=take("normal_weight", float, 1.0),
                refine_rounds=take("refine_rounds", int, 2),
                knn_candidates=take("knn_candidates", int, 8),
                association_threshold=take("association_threshold", float, 3.0),
                cov_floor=take("cov_floor", float, 1e-6),
                concavity_threshold=take("concavity_threshold", float, 1e-3),
                concave_penalty=take("concave_penalty", float, 5.0))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.concavity_threshold = cfg.overseg.concavity_threshold
        cfg.concave_penalty = cfg.overseg.concave_penalty

        cfg.prob_floor = take("prob_floor", float, cfg.prob_floor)
        cfg.depth_tol_abs = take("depth_tol_abs", float, cfg.depth_tol_abs)
        cfg.depth_tol_rel = take("depth_tol_rel", float, cfg.depth_tol_rel)

        cfg.segconv_enabled = take("segconv_enabled", _as_bool, cfg.segconv_enabled)
        cfg.segconv_k = take("segconv_k", int, cfg.segconv_k)
        widths = take("layer_widths", str, None)
        if widths:
            cfg.layer_widths = tuple(int(w) for w in widths.split(",") if w.strip())
        cfg.weight_hidden = take("weight_hidden", int, cfg.weight_hidden)
        cfg.feature_hidden = take("feature_hidden", int, cfg.feature_hidden)
        cfg.segment_prior_floor = take("segment_prior_floor", float,
                                       cfg.segment_prior_floor)

        cfg.keyframe_stride = take("keyframe_stride", int, cfg.keyframe_stride)
        if cfg.keyframe_stride < 1:
            raise ConfigError("keyframe_stride must be >= 1")
        cfg.seed = take("seed", int, cfg.seed)
        return cfg


def atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n")
                       .encode("utf-8"))


# ---------------------------------------------------------------------------
# Map + frame loading
# ---------------------------------------------------------------------------

def load_map(config: PipelineConfig):
    """Map from config.map_ply plus its ground-truth labels when present."""
    if config.map_ply is None:
        raise ConfigError("map_ply is required")
    ply = smio.read_ply(config.map_ply)
    smap, labels = surfel_map_from_ply(ply, voxel_size=config.voxel_size)
    if config.normals_k > 0:
        estimate_normals(smap, k=config.normals_k)
    elif smap.normals is None:
        estimate_normals(smap, k=16)
    return smap, labels


@dataclass
class FrameSource:
    poses: list
    depth_files: list
    prob_files: list

    def __len__(self):
        return len(self.poses)


def load_frames(config: PipelineConfig) -> FrameSource:
    for key in ("trajectory", "depth_dir", "prob_dir"):
        if getattr(config, key) is None:
            raise ConfigError(f"{key} is required")
    if config.intrinsics is None:
        raise ConfigError("camera intrinsics are required")
    _, trans, quats = smio.read_trajectory(config.trajectory)
    poses = [Pose(q, t) for q, t in zip(quats, trans)]
    depth_files = sorted(Path(config.depth_dir).glob("*.png"))
    prob_files = sorted(Path(config.prob_dir).glob("*.smpt"))
    if len(depth_files) != len(poses) or len(prob_files) != len(poses):
        raise ConfigError(
            f"frame count mismatch: {len(poses)} poses, "
            f"{len(depth_files)} depth maps, {len(prob_files)} probability maps")
    return FrameSource(poses, depth_files, prob_files)


# ---------------------------------------------------------------------------
# The pipeline itself
# ---------------------------------------------------------------------------

class StageTimer:
    def __init__(self):
        self.samples: dict[str, list] = {}

    def add(self, stage: str, seconds: float):
        self.samples.setdefault(stage, []).append(seconds * 1000.0)

    def summary(self) -> dict:
        out = {}
        for stage, ms in sorted(self.samples.items()):
            arr = np.asarray(ms)
            out[stage] = {"mean_ms": float(arr.mean()),
                          "p95_ms": float(np.percentile(arr, 95)),
                          "total_ms": float(arr.sum()),
                          "count": len(arr)}
        return out


@dataclass
class PipelineResult:
    labels: np.ndarray
    segmentation: Segmentation
    posterior: ClassPosterior
    metrics: dict
    timing: dict


def _final_labels(config, posterior, seg, seg_dist):
    """Combine element posteriors with segment predictions.

    The segment distribution acts as one extra multiplicative observation,
    floored at `segment_prior_floor` so that consistent direct evidence on
    an element can never be overturned by its segment.
    """
    if not config.segconv_enabled or not seg_dist:
        return posterior.argmax()
    combined = posterior.probs.copy()
    labels = np.array(sorted(seg_dist), dtype=np.int64)
    dist = np.stack([seg_dist[int(l)] for l in labels])
    dist = np.maximum(dist, config.segment_prior_floor)
    assigned = np.nonzero(np.isin(seg.assignment, labels))[0]
    rows = np.searchsorted(labels, seg.assignment[assigned])
    combined[assigned] *= dist[rows]
    combined /= combined.sum(axis=1, keepdims=True)
    return combined.argmax(axis=1)


def _infer_segments(config, smap, seg, posterior, weights, target_labels):
    """Pool posteriors and run the network on target segments plus context."""
    live = np.asarray(sorted(l for l in target_labels
                             if l in seg._row_of), dtype=np.int64)
    if len(live) == 0:
        return {}
    rows = seg.rows_of(live)
    k = min(config.segconv_k, seg.num_segments)
    _, ctx_rows = seg.kdtree().query(seg.centers[rows], k=k)
    context = np.unique(np.concatenate([np.atleast_2d(ctx_rows).reshape(len(rows), -1)
                                        .ravel(), rows]))
    ctx_labels = seg.labels[context]
    _, pooled = pool_segment_posteriors(posterior, seg, labels=ctx_labels)
    scene = build_scene(seg, pooled, weights.config, labels=ctx_labels)
    logits = infer(scene, weights)
    probs = softmax(logits)
    want = set(int(l) for l in live)
    return {int(l): probs[i] for i, l in enumerate(scene.labels) if int(l) in want}


def run_pipeline(config: PipelineConfig, offline: bool = False) -> PipelineResult:
    """Replay the keyframes and produce final labels, metrics and timings.

    `offline=True` fuses every keyframe first, segments the complete map in
    one batch and runs a single network pass, which is the reference the
    incremental mode is measured against.
    """
    if config.segconv_enabled and config.weights_file is None:
        raise ConfigError("segconv_enabled requires weights_file")
    smap, gt_labels = load_map(config)
    frames = load_frames(config)
    weights = None
    if config.segconv_enabled:
        weights = load_weights(config.weights_file, config.segconv_config())

    keyframes = list(range(0, len(frames), config.keyframe_stride))
    posterior = ClassPosterior.uniform(len(smap), config.num_classes,
                                       config.prob_floor)
    seg = Segmentation(smap, np.full(len(smap), -1, dtype=np.int64),
                       cov_floor=config.overseg.cov_floor)
    seg_dist: dict[int, np.ndarray] = {}
    timer = StageTimer()

    def lift(idx):
        depth = smio.read_depth(frames.depth_files[idx],
                                config.intrinsics.depth_scale)
        probs = smio.read_tensor(frames.prob_files[idx])
        if probs.shape[:2] != depth.shape or probs.shape[2] != config.num_classes:
            raise ConfigError(f"frame {idx}: probability tensor shape "
                              f"{probs.shape} inconsistent with depth "
                              f"{depth.shape} and {config.num_classes} classes")
        t0 = time.perf_counter()
        ids, vecs = project_observations(probs, depth, frames.poses[idx],
                                         config.intrinsics, smap,
                                         depth_tolerance=config.depth_tolerance)
        timer.add("lift", time.perf_counter() - t0)
        return ids, vecs

    if offline:
        all_new = []
        for idx in keyframes:
            ids, vecs = lift(idx)
            new = ids[posterior.counts[ids] == 0]
            all_new.append(new)
            t0 = time.perf_counter()
            posterior.update(ids, vecs)
            timer.add("fusion", time.perf_counter() - t0)
        observed = np.unique(np.concatenate(all_new)) if all_new else \
            np.empty(0, np.int64)
        t0 = time.perf_counter()
        if len(observed) == len(smap):
            graph = build_graph(smap, config.concavity_threshold,
                                config.concave_penalty)
            seg = segment_map(graph, smap, config.overseg)
        elif len(observed):
            seg, _ = integrate_updates(smap, seg, observed, config.overseg)
        timer.add("overseg", time.perf_counter() - t0)
        if config.segconv_enabled and seg.num_segments:
            t0 = time.perf_counter()
            seg_dist = _infer_segments(config, smap, seg, posterior, weights,
                                       [int(l) for l in seg.labels])
            timer.add("segment_network", time.perf_counter() - t0)
    else:
        for idx in keyframes:
            ids, vecs = lift(idx)
            new = ids[posterior.counts[ids] == 0]
            t0 = time.perf_counter()
            posterior.update(ids, vecs)
            timer.add("fusion", time.perf_counter() - t0)

            changed = set()
            if len(new):
                t0 = time.perf_counter()
                seg, changed = integrate_updates(smap, seg, new, config.overseg)
                timer.add("overseg", time.perf_counter() - t0)
            elif len(ids):
                # no geometry change; segments with fresh observations still
                # need their predictions refreshed
                touched = seg.assignment[ids]
                changed = set(int(l) for l in np.unique(touched[touched >= 0]))
            if config.segconv_enabled and changed:
                t0 = time.perf_counter()
                for stale in [l for l in seg_dist if l not in seg._row_of]:
                    del seg_dist[stale]
                seg_dist.update(_infer_segments(config, smap, seg, posterior,
                                                weights, changed))
                timer.add("segment_network", time.perf_counter() - t0)
        for stale in [l for l in seg_dist if l not in seg._row_of]:
            del seg_dist[stale]

    final = _final_labels(config, posterior, seg, seg_dist)
    metrics = evaluate(config, smap, seg, final, gt_labels)
    return PipelineResult(labels=final, segmentation=seg, posterior=posterior,
                          metrics=metrics, timing=timer.summary())


def evaluate(config, smap, seg, pred_labels, gt_labels) -> dict:
    """Metrics document; empty sections when ground truth is unavailable."""
    out: dict = {"num_elements": int(len(smap))}
    covered = seg.assignment >= 0
    out["segments"] = {"count": int(seg.num_segments)}
    stats = segment_size_stats(seg.assignment)
    out["segments"].update(stats.to_dict())
    if seg.num_segments:
        out["segments"]["size_cost"] = size_cost(seg, config.overseg.expected_size)
    if gt_labels is not None:
        m = semantic_metrics(gt_labels, pred_labels, config.num_classes)
        out["semantic"] = m.to_dict()
        ose, _ = oversegmentation_error(seg.assignment[covered],
                                        gt_labels[covered],
                                        config.num_classes)
        out["segments"]["ose_percent"] = float(ose)
    if config.regions_ply is not None:
        regions = smio.read_ply(config.regions_ply).vertex.get("label")
        if regions is not None and len(regions) == len(smap) and covered.any():
            use = undersegmentation_error(seg.assignment[covered],
                                          np.asarray(regions)[covered])
            out["segments"]["use_percent"] = float(use)
            out["segments"]["use_formula"] = \
                "100 * (sum_regions sum_overlapping_segment_sizes - N) / N"
    return out


# ---------------------------------------------------------------------------
# Output writing
# ---------------------------------------------------------------------------

_LABEL_PALETTE = np.array([
    [166, 129, 96], [217, 217, 204], [140, 179, 204], [204, 89, 77],
    [89, 166, 89], [179, 128, 191], [217, 179, 77], [102, 102, 179],
    [77, 170, 170], [200, 120, 160],
], dtype=np.uint8)


def write_labeled_ply(path: Path, smap: SurfelMap, labels: np.ndarray,
                      segments: np.ndarray | None = None) -> None:
    vertex = {
        "x": smap.positions[:, 0].astype(np.float32),
        "y": smap.positions[:, 1].astype(np.float32),
        "z": smap.positions[:, 2].astype(np.float32),
    }
    if smap.normals is not None:
        vertex["nx"] = smap.normals[:, 0].astype(np.float32)
        vertex["ny"] = smap.normals[:, 1].astype(np.float32)
        vertex["nz"] = smap.normals[:, 2].astype(np.float32)
    colors = _LABEL_PALETTE[np.asarray(labels) % len(_LABEL_PALETTE)]
    vertex["red"] = colors[:, 0]
    vertex["green"] = colors[:, 1]
    vertex["blue"] = colors[:, 2]
    vertex["label"] = np.asarray(labels).astype(np.uint16)
    if segments is not None:
        vertex["segment"] = np.where(np.asarray(segments) < 0, 0,
                                     np.asarray(segments)).astype(np.uint32)
    tmp = path.with_name(path.name + ".tmp")
    smio.write_ply(tmp, vertex, binary=True)
    os.replace(tmp, path)


def write_segmentation_ply(path: Path, smap: SurfelMap, seg: Segmentation) -> None:
    """Segmentation export: per-element uint32 segment label, colored."""
    rng = np.random.default_rng(7)
    palette = rng.integers(40, 256, size=(max(seg.num_segments, 1), 3),
                           dtype=np.uint8)
    assign = np.where(seg.assignment < 0, 0, seg.assignment)
    rows = np.zeros(len(assign), dtype=np.int64)
    if seg.num_segments:
        rows = np.clip(seg.rows_of(assign), 0, seg.num_segments - 1)
    colors = palette[rows % len(palette)]
    vertex = {
        "x": smap.positions[:, 0].astype(np.float32),
        "y": smap.positions[:, 1].astype(np.float32),
        "z": smap.positions[:, 2].astype(np.float32),
        "red": colors[:, 0], "green": colors[:, 1], "blue": colors[:, 2],
        "segment": assign.astype(np.uint32),
    }
    tmp = path.with_name(path.name + ".tmp")
    smio.write_ply(tmp, vertex, binary=True)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Timing harness
# ---------------------------------------------------------------------------

def bench(config: PipelineConfig, num_elements: int = 100_000,
          num_keyframes: int = 50, reobserve_fraction: float = 0.1) -> dict:
    """Per-keyframe stage latencies on a synthetic map of ~num_elements.

    Elements are revealed in angular sweeps to mimic a camera orbit;
    observations are synthesized directly so only the measured stages do
    real work: posterior update, incremental segmentation and segment
    network inference on the changed segments.
    """
    from .synthetic import SceneSpec, BoxObject, build_map

    rng = np.random.default_rng(config.seed)
    room = (5.0, 5.0, 2.5)
    area = 2 * (room[0] * room[1] + room[0] * room[2] + room[1] * room[2])
    voxel = float(np.sqrt(area / num_elements))
    spec = SceneSpec(room_size=room, voxel_size=voxel,
                     objects=[BoxObject((1.5, 1.5), (0.8, 0.8, 0.7), 3),
                              BoxObject((3.5, 3.2), (1.0, 0.7, 0.9), 4)],
                     seed=config.seed)
    smap, gt_labels, _ = build_map(spec)
    C = max(config.num_classes, spec.num_classes)

    weights = None
    if config.segconv_enabled:
        scfg = config.segconv_config()
        scfg = SegConvConfig(num_classes=C, k_neighbors=scfg.k_neighbors,
                             layer_widths=scfg.layer_widths,
                             weight_hidden=scfg.weight_hidden,
                             feature_hidden=scfg.feature_hidden)
        if config.weights_file is not None:
            weights = load_weights(config.weights_file, scfg)
        else:
            weights = SegConvWeights.initialize(scfg, seed=config.seed)

    # angular reveal order around the room center
    center = np.array([room[0] / 2, room[1] / 2, 0.0])
    ang = np.arctan2(smap.positions[:, 1] - center[1],
                     smap.positions[:, 0] - center[0])
    order = np.argsort(ang, kind="stable")
    chunks = np.array_split(order, num_keyframes)

    posterior = ClassPosterior.uniform(len(smap), C, config.prob_floor)
    seg = Segmentation(smap, np.full(len(smap), -1, dtype=np.int64),
                       cov_floor=config.overseg.cov_floor)
    seg_dist: dict[int, np.ndarray] = {}
    timer = StageTimer()
    seen = np.zeros(len(smap), dtype=bool)

    for chunk in chunks:
        revisit_pool = np.nonzero(seen)[0]
        revisit = rng.choice(revisit_pool,
                             size=int(len(revisit_pool) * reobserve_fraction),
                             replace=False) if len(revisit_pool) else \
            np.empty(0, np.int64)
        ids = np.concatenate([chunk, revisit])
        vecs = np.full((len(ids), C), 0.2 / (C - 1))
        vecs[np.arange(len(ids)), gt_labels[ids]] = 0.8
        seen[chunk] = True

        t0 = time.perf_counter()
        posterior.update(ids, vecs)
        timer.add("fusion", time.perf_counter() - t0)

        t0 = time.perf_counter()
        seg, changed = integrate_updates(smap, seg, chunk, config.overseg)
        timer.add("overseg", time.perf_counter() - t0)

        if config.segconv_enabled and changed:
            t0 = time.perf_counter()
            for stale in [l for l in seg_dist if l not in seg._row_of]:
                del seg_dist[stale]
            seg_dist.update(_infer_segments(config, smap, seg, posterior,
                                            weights, changed))
            timer.add("segment_network", time.perf_counter() - t0)

    summary = timer.summary()
    result = {
        "num_elements": int(len(smap)),
        "num_keyframes": num_keyframes,
        "stages": summary,
        "budgets_ms": {"overseg": 50.0, "segment_network": 20.0, "fusion": 5.0},
    }
    result["within_budget"] = {
        stage: bool(summary.get(stage, {"mean_ms": 0.0})["mean_ms"] <= budget)
        for stage, budget in result["budgets_ms"].items()
    }
    return result
