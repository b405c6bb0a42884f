"""Hypergraph construction and convolution for the knowledge-integration head.

Each vertex spawns one hyperedge containing itself plus its K nearest
neighbors under Euclidean distance. Convolution applies the symmetric
degree-normalized propagation operator followed by a trainable linear map
and ReLU. The integration head runs two such stacks, one over pixel
vertices (spatial view) and one over channel vertices (feature view), then
classifies the concatenated maps with a 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from mscada.tensor import (
    Tensor,
    concat,
    conv2d,
    masked_weighted_cross_entropy,
    matmul,
    relu,
    reshape,
    slice_,
    transpose,
)
from mscada.pseudo import StrongTransform, trans_labels


@dataclass
class Hypergraph:
    incidence: np.ndarray       # (n_vertices, n_hyperedges) binary
    edge_weights: np.ndarray    # (n_hyperedges,)
    vertex_degrees: np.ndarray  # d(v) = sum_e w(e) h(v, e)
    edge_degrees: np.ndarray    # delta(e) = sum_v h(v, e)
    propagation: np.ndarray     # normalized (n, n) operator, symmetric
    _prop_tensor: Tensor | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_hyperedges(self) -> int:
        return self.incidence.shape[1]

    def propagation_tensor(self) -> Tensor:
        if self._prop_tensor is None:
            self._prop_tensor = Tensor(self.propagation)
        return self._prop_tensor


def _knn_indices(d2: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k smallest entries; ties go to the lower index.

    The diagonal of ``d2`` must already be +inf. Uses argpartition with a
    candidate pad and falls back to a full stable sort for rows whose
    boundary value is tied beyond the candidate set.
    """
    n = d2.shape[0]
    pad = 8
    if n <= 256 or k + pad + 1 >= n:
        order = np.argsort(d2, axis=1, kind="stable")
        return order[:, :k]
    m = k + pad
    cand = np.argpartition(d2, m, axis=1)[:, :m + 1]
    cand.sort(axis=1)  # ascending index order makes the stable sort break ties low
    dc = np.take_along_axis(d2, cand, axis=1)
    order = np.argsort(dc, axis=1, kind="stable")
    picked = np.take_along_axis(cand, order[:, :k], axis=1)
    boundary = np.take_along_axis(dc, order[:, k - 1:k], axis=1)
    total_ties = (d2 == boundary).sum(axis=1)
    cand_ties = (dc == boundary).sum(axis=1)
    for row in np.nonzero(total_ties > cand_ties)[0]:
        picked[row] = np.argsort(d2[row], kind="stable")[:k]
    return picked


def knn_hyperedges(x, k: int, edge_weights: np.ndarray | None = None) -> Hypergraph:
    """Build one hyperedge per vertex from its K nearest neighbors.

    x: (n, d) vertex features (Tensor or array; the graph topology is a
    constant, gradients never flow through neighbor selection).
    """
    feats = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    n = feats.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"neighbor count k={k} must be in [1, {n - 1}] for {n} vertices")
    sq = (feats * feats).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (feats @ feats.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    neighbors = _knn_indices(d2, k)
    incidence = np.zeros((n, n), dtype=np.float64)
    incidence[np.arange(n), np.arange(n)] = 1.0
    incidence[neighbors.ravel(), np.repeat(np.arange(n), k)] = 1.0
    w = np.ones(n) if edge_weights is None else np.asarray(edge_weights, dtype=np.float64)
    return _finalize(incidence, w)


def _finalize(incidence: np.ndarray, w: np.ndarray) -> Hypergraph:
    edge_deg = incidence.sum(axis=0)
    vertex_deg = incidence @ w
    if np.any(vertex_deg <= 0.0):
        raise ValueError("hypergraph has a zero-degree vertex; propagation is singular")
    if np.any(edge_deg <= 0.0):
        raise ValueError("hypergraph has an empty hyperedge")
    dv_inv_sqrt = 1.0 / np.sqrt(vertex_deg)
    n = incidence.shape[0]
    if n > 256:
        hs = sp.csr_matrix(incidence)
        mid = (hs.multiply(w / edge_deg) @ hs.T).toarray()
    else:
        mid = (incidence * (w / edge_deg)) @ incidence.T
    prop = mid * dv_inv_sqrt[:, None] * dv_inv_sqrt[None, :]
    return Hypergraph(incidence, w, vertex_deg, edge_deg, prop)


def dump_incidence(g: Hypergraph, path) -> None:
    """Write the incidence matrix as '<vertex> <edge>' coordinate lines."""
    vs, es = np.nonzero(g.incidence)
    with open(path, "w") as f:
        for v, e in zip(vs, es):
            f.write(f"{v} {e}\n")


@dataclass
class HgcnLayer:
    theta: Tensor  # (in_dim, out_dim)


def hypergraph_conv(g: Hypergraph, x: Tensor, layer: HgcnLayer) -> Tensor:
    """ReLU(P @ X @ Theta) with P the degree-normalized propagation operator."""
    return relu(matmul(g.propagation_tensor(), matmul(x, layer.theta)))


@dataclass
class IntegrationHead:
    spatial_layers: list[HgcnLayer]
    feature_layers: list[HgcnLayer]
    classifier_w: Tensor
    classifier_b: Tensor
    k_spatial: int
    k_feature: int

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.spatial_layers):
            params[f"head.spatial.{i}.theta"] = layer.theta
        for i, layer in enumerate(self.feature_layers):
            params[f"head.feature.{i}.theta"] = layer.theta
        params["head.classifier.w"] = self.classifier_w
        params["head.classifier.b"] = self.classifier_b
        return params


def default_k_spatial(height: int, width: int) -> int:
    return min(64, height * width - 1)


def default_k_feature(n_f: int) -> int:
    return min(8, n_f - 1)


def init_integration_head(rng: np.random.Generator, num_sources: int, n_f: int,
                          height: int, width: int, out_classes: int,
                          k_spatial: int | None = None,
                          k_feature: int | None = None) -> IntegrationHead:
    """He-uniform initialized two-view head.

    Spatial stack widths follow n_f*(k+1) -> n_f*k -> n_f; feature stack
    widths follow hw*(k+1) -> hw*k -> hw.
    """
    k = num_sources
    hw = height * width

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    spatial_dims = [n_f * (k + 1), n_f * k, n_f]
    feature_dims = [hw * (k + 1), hw * k, hw]
    spatial = [HgcnLayer(he((spatial_dims[i], spatial_dims[i + 1]), spatial_dims[i]))
               for i in range(2)]
    feature = [HgcnLayer(he((feature_dims[i], feature_dims[i + 1]), feature_dims[i]))
               for i in range(2)]
    cls_w = he((out_classes, 2 * n_f, 1, 1), 2 * n_f)
    cls_b = Tensor(np.zeros(out_classes), requires_grad=True)
    ks = default_k_spatial(height, width) if k_spatial is None else k_spatial
    kf = default_k_feature(n_f) if k_feature is None else k_feature
    return IntegrationHead(spatial, feature, cls_w, cls_b, ks, kf)


def integrate(head: IntegrationHead, features: list[Tensor]) -> Tensor:
    """Fuse k+1 feature maps (B, N_f, H, W) into per-pixel class logits.

    Per batch element: concatenate channels, run the spatial view over pixel
    vertices and the feature view over channel vertices (each on a hypergraph
    built from its own first-layer input), reshape both back to H x W maps,
    concatenate [spatial || feature] and classify with a 1x1 convolution.
    """
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ValueError(f"feature maps disagree in shape: {sorted(shapes)}")
    batch, n_f, height, width = features[0].shape
    n_maps = len(features)
    hw = height * width
    stacked = concat(features, axis=1)  # (B, n_maps*n_f, H, W)
    per_sample = []
    for b in range(batch):
        xb = reshape(slice_(stacked, (slice(b, b + 1),)), (n_maps * n_f, hw))
        x1 = transpose(xb, (1, 0))  # (hw, n_maps*n_f): pixel vertices
        g1 = knn_hyperedges(x1, head.k_spatial)
        h1 = x1
        for layer in head.spatial_layers:
            h1 = hypergraph_conv(g1, h1, layer)
        spatial_map = reshape(transpose(h1, (1, 0)), (1, n_f, height, width))

        x2 = reshape(transpose(reshape(xb, (n_maps, n_f, hw)), (1, 0, 2)),
                     (n_f, n_maps * hw))  # channel vertices
        g2 = knn_hyperedges(x2, head.k_feature)
        h2 = x2
        for layer in head.feature_layers:
            h2 = hypergraph_conv(g2, h2, layer)
        feature_map = reshape(h2, (1, n_f, height, width))

        per_sample.append(concat([spatial_map, feature_map], axis=1))
    fused = concat(per_sample, axis=0) if batch > 1 else per_sample[0]
    return conv2d(fused, head.classifier_w, head.classifier_b)


def multi_domain_loss(head_logits: Tensor, pseudo: np.ndarray, gate: np.ndarray,
                      transforms: list[StrongTransform]) -> Tensor:
    """Transfer loss: cross-entropy of head logits (computed on strongly
    transformed targets) against the identically transformed pseudo-labels,
    gated by the binary confidence weights."""
    labels, weights = [], []
    for b, t in enumerate(transforms):
        y_t, w_t = trans_labels(t, pseudo[b], gate[b])
        labels.append(y_t)
        weights.append(w_t)
    return masked_weighted_cross_entropy(head_logits, np.stack(labels), np.stack(weights))
