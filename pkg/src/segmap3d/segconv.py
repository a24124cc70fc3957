"""Segment-level convolutional network for semantic label refinement.

Segments are nodes; each layer mixes a segment's K nearest neighbors using
a kernel predicted from view-invariant pair geometry. Per neighbor pair the
weight net maps the 10 pair-geometry scalars to a kernel vector, the feature
net transforms the neighbor's input feature, and their elementwise product
is averaged over the neighborhood:

    out(x) = relu( 1/|N(x)| * sum_{y in N(x)} W(phi_xy) * Phi(f_y) )

Three such layers feed a linear classifier. Training is plain gradient
descent on softmax cross-entropy with hand-derived reverse-mode gradients,
sized for small scenes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Segmentation, SegmentStats
from .io import FormatError

PAIR_FEATURE_DIM = 10


@dataclass
class SegConvConfig:
    """Network shape and input-feature selection."""

    num_classes: int
    k_neighbors: int = 64
    layer_widths: tuple = (32, 32, 32)
    weight_hidden: int = 8    # hidden width of the kernel-predicting net
    feature_hidden: int = 64  # hidden width of the feature net
    include_probs: bool = True
    include_color: bool = True
    include_position: bool = True
    include_normal: bool = True

    @property
    def input_dim(self) -> int:
        d = self.num_classes if self.include_probs else 0
        d += 3 if self.include_color else 0
        d += 3 if self.include_position else 0
        d += 3 if self.include_normal else 0
        return d


@dataclass
class LayerWeights:
    ww0: np.ndarray  # (10, weight_hidden)
    bw0: np.ndarray
    ww1: np.ndarray  # (weight_hidden, d_out)
    bw1: np.ndarray
    wf0: np.ndarray  # (d_in, feature_hidden)
    bf0: np.ndarray
    wf1: np.ndarray  # (feature_hidden, d_out)
    bf1: np.ndarray


@dataclass
class SegConvWeights:
    """All parameters of the stacked segment-convolution network."""

    config: SegConvConfig
    layers: list
    classifier_w: np.ndarray
    classifier_b: np.ndarray

    @classmethod
    def initialize(cls, config: SegConvConfig, seed: int = 0) -> "SegConvWeights":
        """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.

        Values are rounded through float32 so that saving and reloading is
        an exact round trip.
        """
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            return w.astype(np.float32).astype(np.float64)

        layers = []
        d_in = config.input_dim
        for d_out in config.layer_widths:
            layers.append(LayerWeights(
                ww0=glorot(PAIR_FEATURE_DIM, config.weight_hidden),
                bw0=np.zeros(config.weight_hidden),
                ww1=glorot(config.weight_hidden, d_out),
                bw1=np.zeros(d_out),
                wf0=glorot(d_in, config.feature_hidden),
                bf0=np.zeros(config.feature_hidden),
                wf1=glorot(config.feature_hidden, d_out),
                bf1=np.zeros(d_out),
            ))
            d_in = d_out
        return cls(config=config, layers=layers,
                   classifier_w=glorot(d_in, config.num_classes),
                   classifier_b=np.zeros(config.num_classes))

    def named_tensors(self):
        out = []
        for i, lw in enumerate(self.layers):
            for name in ("ww0", "bw0", "ww1", "bw1", "wf0", "bf0", "wf1", "bf1"):
                out.append((f"layer{i}.{name}", getattr(lw, name)))
        out.append(("classifier.w", self.classifier_w))
        out.append(("classifier.b", self.classifier_b))
        return out

    def zeros_like(self) -> "SegConvWeights":
        return SegConvWeights(
            config=self.config,
            layers=[LayerWeights(**{k: np.zeros_like(getattr(lw, k))
                                    for k in ("ww0", "bw0", "ww1", "bw1",
                                              "wf0", "bf0", "wf1", "bf1")})
                    for lw in self.layers],
            classifier_w=np.zeros_like(self.classifier_w),
            classifier_b=np.zeros_like(self.classifier_b))

    def axpy(self, alpha: float, other: "SegConvWeights") -> None:
        """In-place self += alpha * other over every parameter tensor."""
        for (_, a), (_, b) in zip(self.named_tensors(), other.named_tensors()):
            a += alpha * b


# ---------------------------------------------------------------------------
# View-invariant pair geometry
# ---------------------------------------------------------------------------

def pair_features_batch(cx, nx, covx, cy, ny, covy) -> np.ndarray:
    """Pair-geometry descriptors for x (..., 3) against y (..., 3).

    The descriptor lives in the orthonormal frame built from the unit
    displacement r and the source normal via Gram-Schmidt, so it is exactly
    invariant to rigid motions of the scene:

        [nx.ny, r.nx, r.ny, ny.v, ny.w, d.nx, d.(ny x nx), |d|, sx, sy]

    with d the raw displacement, v the normal component orthogonal to r,
    w = r x v, and sx/sy the covariance spread along r. Entries that depend
    on directions left undefined by degenerate inputs (coincident centers,
    normal parallel to r) are zeroed.
    """
    cx, nx = np.asarray(cx, np.float64), np.asarray(nx, np.float64)
    cy, ny = np.asarray(cy, np.float64), np.asarray(ny, np.float64)
    d = cy - cx
    rn = np.linalg.norm(d, axis=-1)
    r_ok = rn > 1e-9
    safe_rn = np.where(r_ok, rn, 1.0)
    r = d / safe_rn[..., None]
    r = np.where(r_ok[..., None], r, 0.0)

    nx_dot_r = np.einsum("...i,...i->...", nx, r)
    v_raw = nx - nx_dot_r[..., None] * r
    vn = np.linalg.norm(v_raw, axis=-1)
    v_ok = r_ok & (vn > 1e-9)

    # axis completion keeps the basis well defined when nx is parallel to r
    fallback_axis = np.argmin(np.abs(r), axis=-1)
    e = np.zeros_like(r)
    np.put_along_axis(e, fallback_axis[..., None], 1.0, axis=-1)
    e_perp = e - np.einsum("...i,...i->...", e, r)[..., None] * r
    en = np.linalg.norm(e_perp, axis=-1)
    e_perp = e_perp / np.where(en > 1e-12, en, 1.0)[..., None]

    v = np.where(v_ok[..., None], v_raw / np.where(v_ok, vn, 1.0)[..., None], e_perp)
    w = np.cross(r, v)

    sx = np.sqrt(np.maximum(np.einsum("...i,...ij,...j->...", r, covx, r), 0.0))
    sy = np.sqrt(np.maximum(np.einsum("...i,...ij,...j->...", r, covy, r), 0.0))

    dot = lambda a, b: np.einsum("...i,...i->...", a, b)
    phi = np.stack([
        dot(nx, ny),
        np.where(r_ok, dot(r, nx), 0.0),
        np.where(r_ok, dot(r, ny), 0.0),
        np.where(v_ok, dot(ny, v), 0.0),
        np.where(v_ok, dot(ny, w), 0.0),
        dot(d, nx),
        dot(d, np.cross(ny, nx)),
        rn,
        np.where(r_ok, sx, 0.0),
        np.where(r_ok, sy, 0.0),
    ], axis=-1)
    return phi


def pair_features(stats_x: SegmentStats, stats_y: SegmentStats) -> np.ndarray:
    """Descriptor for a single segment pair."""
    return pair_features_batch(stats_x.center, stats_x.normal, stats_x.covariance,
                               stats_y.center, stats_y.normal, stats_y.covariance)


# ---------------------------------------------------------------------------
# Scenes: the network's view of a segmentation
# ---------------------------------------------------------------------------

@dataclass
class SegmentScene:
    """Per-segment features, K-NN lists and pair geometry, ready to run."""

    labels: np.ndarray      # (S,) segment labels, row order of everything below
    features: np.ndarray    # (S, d_in)
    neighbors: np.ndarray   # (S, K) rows (not labels)
    pair_feats: np.ndarray  # (S, K, 10)

    @property
    def num_segments(self) -> int:
        return len(self.labels)


def build_scene(seg: Segmentation, seg_probs: np.ndarray | None,
                config: SegConvConfig, labels=None) -> SegmentScene:
    """Assemble a SegmentScene from a segmentation.

    `seg_probs` must be aligned with `labels` (default: all segments in
    label-sorted order). Positions in the feature block are centered on the
    mean segment center of the participating segments.
    """
    if labels is None:
        labels = seg.labels
    labels = np.unique(np.asarray(labels, dtype=np.int64))
    rows = seg.rows_of(labels)
    centers = seg.centers[rows]
    covs = seg.covariances[rows]
    normals = seg.normals[rows]
    S = len(labels)
    if S == 0:
        raise ValueError("cannot build a scene with no segments")

    k = min(config.k_neighbors, S)
    if k == 0:
        raise ValueError("isolated segment: empty neighborhood")
    tree = cKDTree(centers)
    _, nb = tree.query(centers, k=k)
    nb = nb.reshape(S, k)

    phi = pair_features_batch(centers[:, None, :], normals[:, None, :],
                              covs[:, None, :, :],
                              centers[nb], normals[nb], covs[nb])

    blocks = []
    if config.include_probs:
        if seg_probs is None:
            raise ValueError("config includes probability features but none given")
        if seg_probs.shape != (S, config.num_classes):
            raise ValueError("segment probability block has the wrong shape")
        blocks.append(np.asarray(seg_probs, dtype=np.float64))
    if config.include_color:
        colors = _segment_mean_colors(seg, labels)
        blocks.append(colors)
    if config.include_position:
        blocks.append(centers - centers.mean(axis=0))
    if config.include_normal:
        blocks.append(normals)
    features = np.concatenate(blocks, axis=1)
    return SegmentScene(labels=labels, features=features, neighbors=nb,
                        pair_feats=phi)


def _segment_mean_colors(seg: Segmentation, labels: np.ndarray) -> np.ndarray:
    if seg.smap.colors is None:
        return np.zeros((len(labels), 3))
    ids = np.nonzero(np.isin(seg.assignment, labels))[0]
    rows = np.searchsorted(labels, seg.assignment[ids])
    acc = np.zeros((len(labels), 3))
    np.add.at(acc, rows, seg.smap.colors[ids])
    counts = np.bincount(rows, minlength=len(labels)).astype(np.float64)
    counts[counts == 0] = 1.0
    return acc / counts[:, None]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def _layer_forward(feats, nb, phi_flat, lw: LayerWeights, check_finite=False,
                   layer_index=0):
    S, K = nb.shape
    h0 = phi_flat @ lw.ww0 + lw.bw0
    z0 = _relu(h0)
    kern = z0 @ lw.ww1 + lw.bw1                       # (S*K, d_out)
    g0 = feats @ lw.wf0 + lw.bf0
    u0 = _relu(g0)
    phi_f = u0 @ lw.wf1 + lw.bf1                      # (S, d_out)
    phin = phi_f[nb.ravel()]                          # (S*K, d_out)
    prod = kern * phin
    pre = prod.reshape(S, K, -1).sum(axis=1) / K
    out = _relu(pre)
    if check_finite and not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite values in layer {layer_index}")
    cache = (h0 > 0, z0, g0 > 0, u0, phin, kern, pre > 0, feats, phi_flat)
    return out, cache


def _forward(scene: SegmentScene, weights: SegConvWeights, check_finite=False):
    feats = scene.features
    if feats.shape[1] != weights.config.input_dim:
        raise ValueError(
            f"feature width {feats.shape[1]} does not match the network's "
            f"expected input width {weights.config.input_dim}")
    if scene.neighbors.shape[1] == 0:
        raise ValueError("isolated segment: empty neighborhood")
    phi_flat = scene.pair_feats.reshape(-1, PAIR_FEATURE_DIM)
    caches = []
    x = feats
    for i, lw in enumerate(weights.layers):
        x, cache = _layer_forward(x, scene.neighbors, phi_flat, lw,
                                  check_finite, i)
        caches.append(cache)
    logits = x @ weights.classifier_w + weights.classifier_b
    return logits, x, caches


def infer(scene: SegmentScene, weights: SegConvWeights) -> np.ndarray:
    """Class logits per segment, rows aligned with scene.labels."""
    logits, _, _ = _forward(scene, weights)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def gradients(scene: SegmentScene, weights: SegConvWeights,
              labels: np.ndarray):
    """Analytic gradients of the mean cross-entropy over the scene.

    Returns (grads, loss) with `grads` shaped like `weights`. Reverse
    accumulation runs through the classifier, the three convolution layers
    and both internal perceptrons.
    """
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != scene.num_segments:
        raise ValueError("labels must cover all segments in the scene")
    logits, last, caches = _forward(scene, weights, check_finite=True)
    S = scene.num_segments
    K = scene.neighbors.shape[1]
    probs = softmax(logits)
    loss = cross_entropy(logits, y)

    grads = weights.zeros_like()
    dlogits = probs.copy()
    dlogits[np.arange(S), y] -= 1.0
    dlogits /= S
    grads.classifier_w[:] = last.T @ dlogits
    grads.classifier_b[:] = dlogits.sum(axis=0)
    dx = dlogits @ weights.classifier_w.T

    nb_flat = scene.neighbors.ravel()
    for i in reversed(range(len(weights.layers))):
        lw, glw = weights.layers[i], grads.layers[i]
        h0m, z0, g0m, u0, phin, kern, prem, feats, phi_flat = caches[i]
        dpre = dx * prem
        dprod = np.repeat(dpre / K, K, axis=0)        # (S*K, d_out)
        dkern = dprod * phin
        dphin = dprod * kern
        dphi_f = np.zeros((S, dphin.shape[1]))
        np.add.at(dphi_f, nb_flat, dphin)

        glw.wf1[:] = u0.T @ dphi_f
        glw.bf1[:] = dphi_f.sum(axis=0)
        du0 = dphi_f @ lw.wf1.T
        dg0 = du0 * g0m
        glw.wf0[:] = feats.T @ dg0
        glw.bf0[:] = dg0.sum(axis=0)
        dx = dg0 @ lw.wf0.T

        glw.ww1[:] = z0.T @ dkern
        glw.bw1[:] = dkern.sum(axis=0)
        dz0 = dkern @ lw.ww1.T
        dh0 = dz0 * h0m
        glw.ww0[:] = phi_flat.T @ dh0
        glw.bw0[:] = dh0.sum(axis=0)
    return grads, loss


def train_step(scenes, weights: SegConvWeights, labels, step_size: float):
    """One full-batch gradient-descent step over one or more scenes.

    Returns (weights, pre-update mean loss). Scene gradients are averaged so
    the loss is the mean of per-scene mean cross-entropies.
    """
    if isinstance(scenes, SegmentScene):
        scenes, labels = [scenes], [labels]
    total = weights.zeros_like()
    losses = []
    for scene, y in zip(scenes, labels):
        g, loss = gradients(scene, weights, y)
        total.axpy(1.0 / len(scenes), g)
        losses.append(loss)
    weights.axpy(-step_size, total)
    return weights, float(np.mean(losses))


# ---------------------------------------------------------------------------
# Weight serialization: magic "SCNW", u32 tensor count, then per tensor
# u16 name length, UTF-8 name, u32 rank, u32 dims, little-endian f32 payload.
# ---------------------------------------------------------------------------

_WEIGHTS_MAGIC = b"SCNW"


def save_weights(path: str | Path, weights: SegConvWeights) -> None:
    tensors = weights.named_tensors()
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            a = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def _read_exact(blob, offset, size, what):
    if offset + size > len(blob):
        raise FormatError(f"byte {offset}: truncated {what}")
    return blob[offset:offset + size], offset + size


def load_weights(path: str | Path,
                 config: SegConvConfig | None = None) -> SegConvWeights:
    """Load weights saved by `save_weights`.

    Shapes define the architecture; when `config` is given its widths, class
    count and layer count must agree with the file, and its feature flags and
    neighbor count are attached to the result.
    """
    blob = Path(path).read_bytes()
    magic, offset = _read_exact(blob, 0, 4, "magic")
    if magic != _WEIGHTS_MAGIC:
        raise FormatError("byte 0: bad magic, expected 'SCNW'")
    raw, offset = _read_exact(blob, offset, 4, "tensor count")
    count = struct.unpack("<I", raw)[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = _read_exact(blob, offset, 2, "name length")
        nlen = struct.unpack("<H", raw)[0]
        raw, offset = _read_exact(blob, offset, nlen, "tensor name")
        name = raw.decode("utf-8")
        raw, offset = _read_exact(blob, offset, 4, f"rank of '{name}'")
        rank = struct.unpack("<I", raw)[0]
        if rank > 4:
            raise FormatError(f"byte {offset - 4}: implausible rank {rank} "
                              f"for '{name}'")
        raw, offset = _read_exact(blob, offset, 4 * rank, f"dims of '{name}'")
        dims = struct.unpack(f"<{rank}I", raw)
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, offset = _read_exact(blob, offset, 4 * n, f"payload of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)\
            .astype(np.float64)

    if "classifier.w" not in tensors or "classifier.b" not in tensors:
        raise ValueError("shape error: missing tensor 'classifier.w'")
    n_layers = 0
    while f"layer{n_layers}.ww0" in tensors:
        n_layers += 1
    part_names = ("ww0", "bw0", "ww1", "bw1", "wf0", "bf0", "wf1", "bf1")
    expected = {f"layer{i}.{p}" for i in range(n_layers) for p in part_names}
    expected |= {"classifier.w", "classifier.b"}
    for name in sorted(expected - set(tensors)):
        raise ValueError(f"shape error: missing tensor '{name}'")
    for name in sorted(set(tensors) - expected):
        raise ValueError(f"shape error: unexpected tensor '{name}'")

    layers = []
    for i in range(n_layers):
        layers.append(LayerWeights(**{p: tensors[f"layer{i}.{p}"]
                                      for p in part_names}))
    num_classes = tensors["classifier.b"].shape[0]
    widths = tuple(lw.wf1.shape[1] for lw in layers)
    if config is None:
        config = SegConvConfig(num_classes=num_classes, layer_widths=widths)
        # flags cannot be recovered from shapes; callers relying on feature
        # selection should pass their config explicitly
    else:
        if config.num_classes != num_classes:
            raise ValueError(
                f"shape error: 'classifier.b' has {num_classes} classes, "
                f"config expects {config.num_classes}")
        if len(config.layer_widths) != n_layers:
            raise ValueError(
                f"shape error: file has {n_layers} layers "
                f"('layer{n_layers - 1}.ww0'), config expects "
                f"{len(config.layer_widths)}")
        if tuple(config.layer_widths) != widths:
            raise ValueError(f"shape error: layer widths {widths} do not "
                             f"match config {config.layer_widths}")
        if layers and layers[0].wf0.shape[0] != config.input_dim:
            raise ValueError(
                f"shape error: 'layer0.wf0' expects input width "
                f"{layers[0].wf0.shape[0]}, config builds {config.input_dim}")

    w = SegConvWeights(config=config, layers=layers,
                       classifier_w=tensors["classifier.w"],
                       classifier_b=tensors["classifier.b"])
    # consistency of every tensor against the declared widths
    d_in = config.input_dim if config is not None else layers[0].wf0.shape[0]
    for i, lw in enumerate(layers):
        checks = {
            f"layer{i}.ww0": (lw.ww0.shape, (PAIR_FEATURE_DIM, lw.ww0.shape[1])),
            f"layer{i}.ww1": (lw.ww1.shape, (lw.ww0.shape[1], widths[i])),
            f"layer{i}.wf0": (lw.wf0.shape, (d_in, lw.wf0.shape[1])),
            f"layer{i}.wf1": (lw.wf1.shape, (lw.wf0.shape[1], widths[i])),
            f"layer{i}.bw1": (lw.bw1.shape, (widths[i],)),
            f"layer{i}.bf1": (lw.bf1.shape, (widths[i],)),
        }
        for name, (got, want) in checks.items():
            if got != want:
                raise ValueError(f"shape error: tensor '{name}' has shape "
                                 f"{got}, expected {want}")
        d_in = widths[i]
    if w.classifier_w.shape != (d_in, num_classes):
        raise ValueError(f"shape error: tensor 'classifier.w' has shape "
                         f"{w.classifier_w.shape}, expected {(d_in, num_classes)}")
    return w
