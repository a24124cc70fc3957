"""Command line entry points.

Every subcommand takes a single configuration file (flat `key = value`
text); see the README for the full key reference. Outputs land in the
configured `out_dir` and are written atomically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as smio
from .fusion import ClassPosterior
from .geometry import Segmentation, build_graph
from .metrics import (oversegmentation_error, segment_size_stats,
                      semantic_metrics, undersegmentation_error)
from .overseg import segment_map, size_cost
from .pipeline import (ConfigError, PipelineConfig, atomic_write_json, bench,
                       evaluate, load_frames, load_map, run_pipeline,
                       write_labeled_ply, write_segmentation_ply)
from .segconv import build_scene, infer, load_weights, softmax


def _out_dir(config: PipelineConfig) -> Path:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    return config.out_dir


def cmd_segment(config: PipelineConfig) -> int:
    """Mesh/point map -> over-segmentation PLY + run summary JSON."""
    smap, _ = load_map(config)
    graph = build_graph(smap, config.concavity_threshold, config.concave_penalty)
    cost_log: list = []
    seg = segment_map(graph, smap, config.overseg, cost_log=cost_log)
    out = _out_dir(config)
    write_segmentation_ply(out / "segmentation.ply", smap, seg)
    stats = segment_size_stats(seg.assignment)
    summary = {
        "num_elements": int(len(smap)),
        "segment_count": int(seg.num_segments),
        "size_mean": stats.to_dict()["mean"],
        "size_std": stats.to_dict()["std"],
        "final_size_cost": size_cost(seg, config.overseg.expected_size),
        "greedy_cost_trace_first_last": [cost_log[0], cost_log[-1]],
    }
    atomic_write_json(out / "segmentation.json", summary)
    print(f"wrote {out / 'segmentation.ply'} ({seg.num_segments} segments)")
    return 0


def cmd_fuse(config: PipelineConfig) -> int:
    """Frames -> fused per-element class posterior (SMPT tensor)."""
    smap, _ = load_map(config)
    frames = load_frames(config)
    from .fusion import project_observations
    posterior = ClassPosterior.uniform(len(smap), config.num_classes,
                                       config.prob_floor)
    keyframes = list(range(0, len(frames), config.keyframe_stride))
    for idx in keyframes:
        depth = smio.read_depth(frames.depth_files[idx],
                                config.intrinsics.depth_scale)
        probs = smio.read_tensor(frames.prob_files[idx])
        ids, vecs = project_observations(probs, depth, frames.poses[idx],
                                         config.intrinsics, smap,
                                         depth_tolerance=config.depth_tolerance)
        posterior.update(ids, vecs)
    out = _out_dir(config)
    smio.write_tensor(out / "posterior.smpt", posterior.probs)
    smio.write_tensor(out / "counts.smpt", posterior.counts.astype(np.float64))
    atomic_write_json(out / "fuse.json", {
        "num_elements": int(len(smap)),
        "num_keyframes": len(keyframes),
        "observed_elements": int((posterior.counts > 0).sum()),
    })
    print(f"fused {len(keyframes)} keyframes over {len(smap)} elements")
    return 0


def cmd_infer(config: PipelineConfig) -> int:
    """Segmentation + posterior + weights -> labeled PLY."""
    if config.segmentation_ply is None or config.posterior_file is None \
            or config.weights_file is None:
        raise ConfigError("infer requires segmentation_ply, posterior_file "
                          "and weights_file")
    smap, gt_labels = load_map(config)
    seg_ply = smio.read_ply(config.segmentation_ply)
    if "segment" not in seg_ply.vertex:
        raise ConfigError("segmentation_ply lacks a 'segment' property")
    assignment = seg_ply.vertex["segment"].astype(np.int64)
    if len(assignment) != len(smap):
        raise ConfigError("segmentation does not cover the map")
    seg = Segmentation(smap, assignment, cov_floor=config.overseg.cov_floor)
    probs = smio.read_tensor(config.posterior_file)
    if probs.shape != (len(smap), config.num_classes):
        raise ConfigError(f"posterior tensor shape {probs.shape} does not "
                          f"match ({len(smap)}, {config.num_classes})")
    posterior = ClassPosterior(probs, np.ones(len(smap), dtype=np.int64),
                               config.prob_floor)
    weights = load_weights(config.weights_file, config.segconv_config())
    from .fusion import pool_segment_posteriors
    labels_sorted, pooled = pool_segment_posteriors(posterior, seg)
    scene = build_scene(seg, pooled, weights.config)
    logits = infer(scene, weights)
    seg_probs = softmax(logits)
    seg_dist = {int(l): seg_probs[i] for i, l in enumerate(scene.labels)}
    from .pipeline import _final_labels
    final = _final_labels(config, posterior, seg, seg_dist)
    out = _out_dir(config)
    write_labeled_ply(out / "labels.ply", smap, final, seg.assignment)
    metrics = evaluate(config, smap, seg, final, gt_labels)
    atomic_write_json(out / "metrics.json", metrics)
    print(f"wrote {out / 'labels.ply'}")
    return 0


def cmd_eval(config: PipelineConfig) -> int:
    """Predicted PLY vs ground-truth PLY -> metrics JSON."""
    if config.pred_ply is None or config.gt_ply is None:
        raise ConfigError("eval requires pred_ply and gt_ply")
    pred = smio.read_ply(config.pred_ply)
    gt = smio.read_ply(config.gt_ply)
    if "label" not in pred.vertex or "label" not in gt.vertex:
        raise ConfigError("both PLY files need a 'label' property")
    pred_labels = pred.vertex["label"].astype(np.int64)
    gt_labels = gt.vertex["label"].astype(np.int64)
    if len(pred_labels) != len(gt_labels):
        raise ConfigError("prediction and ground truth differ in length")
    m = semantic_metrics(gt_labels, pred_labels, config.num_classes)
    doc = {"semantic": m.to_dict(), "num_elements": int(len(gt_labels))}
    if "segment" in pred.vertex:
        assignment = pred.vertex["segment"].astype(np.int64)
        ose, _ = oversegmentation_error(assignment, gt_labels,
                                        config.num_classes)
        doc["segments"] = segment_size_stats(assignment).to_dict()
        doc["segments"]["ose_percent"] = float(ose)
        if config.regions_ply is not None:
            regions = smio.read_ply(config.regions_ply).vertex["label"]
            doc["segments"]["use_percent"] = float(
                undersegmentation_error(assignment, regions.astype(np.int64)))
            doc["segments"]["use_formula"] = \
                "100 * (sum_regions sum_overlapping_segment_sizes - N) / N"
    out = _out_dir(config)
    atomic_write_json(out / "metrics.json", doc)
    print(json.dumps(doc.get("semantic", {}), indent=2, sort_keys=True))
    return 0


def cmd_run(config: PipelineConfig, offline: bool = False) -> int:
    """Full pipeline: frames -> fused, segmented, network-refined map."""
    result = run_pipeline(config, offline=offline)
    out = _out_dir(config)
    write_labeled_ply(out / "labels.ply", result.segmentation.smap,
                      result.labels, result.segmentation.assignment)
    atomic_write_json(out / "metrics.json", result.metrics)
    atomic_write_json(out / "timing.json", result.timing)
    print(f"wrote {out / 'labels.ply'}")
    if "semantic" in result.metrics:
        print(f"mIoU: {result.metrics['semantic']['miou']}")
    return 0


def cmd_synth(config: PipelineConfig) -> int:
    """Generate a synthetic scene with all pipeline input files."""
    from .synthetic import BoxObject, SceneSpec, generate_scene, write_scene

    kv = config.raw
    objects = []
    for chunk in kv.get("synth_objects", "").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals = [float(x) for x in chunk.split(",")]
        if len(vals) != 6:
            raise ConfigError("synth_objects entries need "
                              "'x,y,sx,sy,sz,class'")
        objects.append(BoxObject((vals[0], vals[1]),
                                 (vals[2], vals[3], vals[4]), int(vals[5])))
    spec = SceneSpec(
        room_size=(float(kv.get("room_w", 4.0)), float(kv.get("room_l", 4.0)),
                   float(kv.get("room_h", 2.5))),
        voxel_size=float(kv.get("synth_voxel_size", kv.get("voxel_size", 0.02))),
        objects=objects,
        num_frames=int(kv.get("synth_frames", 60)),
        depth_noise=float(kv.get("synth_depth_noise", 0.0)),
        label_noise=float(kv.get("synth_label_noise", 0.0)),
        label_confidence=float(kv.get("synth_label_confidence", 1.0)),
        seed=config.seed)
    scene = generate_scene(spec)
    out = _out_dir(config)
    manifest = write_scene(scene, out)
    print(f"wrote scene with {len(scene.smap)} elements to {out}")
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def cmd_bench(config: PipelineConfig) -> int:
    """Timing harness on a synthetic map; prints and saves the report."""
    kv = config.raw
    result = bench(config,
                   num_elements=int(kv.get("bench_elements", 100_000)),
                   num_keyframes=int(kv.get("bench_keyframes", 50)))
    out = _out_dir(config)
    atomic_write_json(out / "bench.json", result)
    for stage, s in result["stages"].items():
        print(f"{stage:>16}: mean {s['mean_ms']:8.3f} ms   "
              f"p95 {s['p95_ms']:8.3f} ms   n={s['count']}")
    print(f"within budget: {result['within_budget']}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="segmap3d",
        description="3D semantic mapping: over-segmentation, multi-view "
                    "fusion and segment-level refinement")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("segment", "over-segment a map into a segmentation PLY"),
            ("fuse", "fuse frame probabilities into a per-element posterior"),
            ("infer", "run the segment network on a segmented map"),
            ("eval", "compare predicted vs ground-truth labels"),
            ("run", "full incremental pipeline"),
            ("synth", "generate a synthetic scene"),
            ("bench", "per-stage timing harness")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", type=Path, help="key = value configuration file")
        if name == "run":
            p.add_argument("--offline", action="store_true",
                           help="batch reference mode instead of incremental")
    args = parser.parse_args(argv)
    try:
        config = PipelineConfig.from_file(args.config)
        if args.command == "segment":
            return cmd_segment(config)
        if args.command == "fuse":
            return cmd_fuse(config)
        if args.command == "infer":
            return cmd_infer(config)
        if args.command == "eval":
            return cmd_eval(config)
        if args.command == "run":
            return cmd_run(config, offline=args.offline)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "bench":
            return cmd_bench(config)
    except (ConfigError, smio.PlyError, smio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
