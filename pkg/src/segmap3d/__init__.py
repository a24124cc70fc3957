"""3D semantic mapping toolkit: quasi-planar over-segmentation of surfel
maps, multi-view re-projection and Bayesian fusion of 2D class
probabilities, a segment-level convolutional network for label refinement,
and the matching evaluation metrics.
"""

from .fusion import (CameraIntrinsics, ClassPosterior, FeatureMap, Pose,
                     fuse_views, pool_segment_posteriors,
                     project_observations, warp_feature_map)
from .geometry import (Segmentation, SegmentStats, SurfelMap, WeightedGraph,
                       build_graph, compute_segment_stats, estimate_normals,
                       knn_segments, load_surfel_map, voxelize_points)
from .metrics import (SemanticMetrics, SizeStats, oversegmentation_error,
                      segment_size_stats, semantic_metrics,
                      undersegmentation_error)
from .overseg import (OversegParams, association_cost, greedy_merge,
                      integrate_updates, refine_boundaries, segment_map,
                      size_cost)
from .segconv import (SegConvConfig, SegConvWeights, SegmentScene,
                      build_scene, gradients, infer, load_weights,
                      pair_features, save_weights, train_step)

__version__ = "0.1.0"
