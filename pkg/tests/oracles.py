"""Independent reference implementations used to check library output.

Everything here is deliberately naive: exhaustive enumeration, double loops
and direct formula evaluation, kept free of the code paths under test.
"""

import itertools

import numpy as np


def all_partitions(n):
    """All set partitions of range(n) as tuples of frozensets."""
    if n == 0:
        return [()]
    parts = []

    def rec(i, blocks):
        if i == n:
            parts.append(tuple(frozenset(b) for b in blocks))
            return
        for b in blocks:
            b.add(i)
            rec(i + 1, blocks)
            b.remove(i)
        blocks.append({i})
        rec(i + 1, blocks)
        blocks.pop()

    rec(0, [])
    return parts


def connected_subsets(n, adj_mask):
    """Bitmasks of all connected vertex subsets of a graph given as
    per-vertex adjacency bitmasks."""
    out = set()
    for mask in range(1, 1 << n):
        start = mask & -mask
        reach = start
        frontier = start
        while frontier:
            nxt = 0
            m = frontier
            while m:
                v = (m & -m).bit_length() - 1
                m &= m - 1
                nxt |= adj_mask[v] & mask
            nxt &= ~reach
            reach |= nxt
            frontier = nxt
        if reach == mask:
            out.add(mask)
    return out


def block_mask(block):
    m = 0
    for v in block:
        m |= 1 << v
    return m


def partition_tables(n, expected_size):
    """Precomputed (block masks, size cost) per set partition of range(n)."""
    tables = []
    for part in all_partitions(n):
        masks = tuple(block_mask(b) for b in part)
        cost = np.mean([abs(len(b) - expected_size) for b in part])
        tables.append((masks, cost))
    return tables


def min_cost_over_contractions(n, edges, expected_size, tables=None):
    """Minimum size cost over every state reachable by merging adjacent
    segments, i.e. over all partitions into connected blocks."""
    adj_mask = [0] * n
    for i, j in edges:
        adj_mask[i] |= 1 << j
        adj_mask[j] |= 1 << i
    ok = connected_subsets(n, adj_mask)
    if tables is None:
        tables = partition_tables(n, expected_size)
    best = np.inf
    for masks, cost in tables:
        if cost < best and all(m in ok for m in masks):
            best = cost
    return best


def is_merge_local_minimum(assignment, edges, expected_size):
    """True when no single merge of two edge-adjacent segments lowers the
    size cost."""
    labels = {}
    for i, l in enumerate(assignment):
        labels.setdefault(l, set()).add(i)
    sizes = {l: len(m) for l, m in labels.items()}
    cost = np.mean([abs(s - expected_size) for s in sizes.values()])
    pairs = set()
    for i, j in edges:
        a, b = assignment[i], assignment[j]
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    for a, b in pairs:
        merged = dict(sizes)
        merged[a] = sizes[a] + sizes[b]
        del merged[b]
        new_cost = np.mean([abs(s - expected_size) for s in merged.values()])
        if new_cost < cost - 1e-12:
            return False
    return True


def connected_graphs(n):
    """Every connected labeled graph on n vertices, as edge lists."""
    verts = list(range(n))
    all_edges = list(itertools.combinations(verts, 2))
    graphs = []
    for bits in range(1 << len(all_edges)):
        edges = [all_edges[k] for k in range(len(all_edges)) if bits >> k & 1]
        adj_mask = [0] * n
        for i, j in edges:
            adj_mask[i] |= 1 << j
            adj_mask[j] |= 1 << i
        full = (1 << n) - 1
        reach = 1
        frontier = 1
        while frontier:
            nxt = 0
            m = frontier
            while m:
                v = (m & -m).bit_length() - 1
                m &= m - 1
                nxt |= adj_mask[v]
            nxt &= ~reach
            reach |= nxt
            frontier = nxt
        if reach == full:
            graphs.append(edges)
    return graphs


def naive_segconv_forward(features, neighbors, pair_feats, weights):
    """Double-loop evaluation of the stacked segment convolution."""

    def mlp2(x, w0, b0, w1, b1):
        return np.maximum(x @ w0 + b0, 0.0) @ w1 + b1

    S, K = neighbors.shape
    x = features
    for lw in weights.layers:
        out = np.zeros((S, lw.wf1.shape[1]))
        for s in range(S):
            acc = np.zeros(lw.wf1.shape[1])
            for t in range(K):
                y = neighbors[s, t]
                kern = mlp2(pair_feats[s, t], lw.ww0, lw.bw0, lw.ww1, lw.bw1)
                phi = mlp2(x[y], lw.wf0, lw.bf0, lw.wf1, lw.bf1)
                acc += kern * phi
            out[s] = np.maximum(acc / K, 0.0)
        x = out
    return x @ weights.classifier_w + weights.classifier_b


def relu_kink_margin(scene, weights):
    """Smallest |pre-activation| over every rectifier in the forward pass.

    Central finite differences are only trustworthy when no rectifier input
    sits within the step size of its kink; gradient-check scenes are sampled
    until this margin is comfortable.
    """
    margin = np.inf
    x = scene.features
    phi_flat = scene.pair_feats.reshape(-1, pair_dim := scene.pair_feats.shape[-1])
    S, K = scene.neighbors.shape
    for lw in weights.layers:
        h0 = phi_flat @ lw.ww0 + lw.bw0
        kern = np.maximum(h0, 0) @ lw.ww1 + lw.bw1
        g0 = x @ lw.wf0 + lw.bf0
        phi_f = np.maximum(g0, 0) @ lw.wf1 + lw.bf1
        pre = (kern * phi_f[scene.neighbors.ravel()]).reshape(S, K, -1)\
            .sum(axis=1) / K
        margin = min(margin, np.abs(h0).min(), np.abs(g0).min(),
                     np.abs(pre).min())
        x = np.maximum(pre, 0)
    return margin


def finite_difference_gradients(scene, weights, labels, h=1e-4):
    """Central finite differences of the loss over every parameter."""
    from segmap3d.segconv import cross_entropy, _forward

    def loss_at(w):
        logits, _, _ = _forward(scene, w)
        return cross_entropy(logits, labels)

    grads = weights.zeros_like()
    for (_, param), (_, gparam) in zip(weights.named_tensors(),
                                       grads.named_tensors()):
        flat = param.reshape(-1)
        gflat = gparam.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_at(weights)
            flat[k] = orig - h
            down = loss_at(weights)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
    return grads
