"""Tissue relation module: tissue graph construction, message passing, projection and fusion.

Per image, class probabilities are thresholded into per-class masks, masked
averages of projected decoder features become node embeddings, classes whose
masks touch after a 3x3 dilation are connected, node embeddings are refined by
an L-layer GNN and broadcast back over their masks.  The resulting map is
projected to the decoder width and added to the decoder features.

Sums whose term order would otherwise depend on class numbering (neighbor
aggregation, overlapping-mask projection) are taken over sorted terms so the
forward pass is exactly equivariant to relabeling the classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .backbone import bn, conv, declare_bn, declare_conv
from .config import ModelConfig
from .params import EMBEDDING, GLOROT, ONES, ZEROS, ModelParams
from .tensor import (
    Tensor,
    add,
    concat,
    exp,
    leaky_relu,
    make_result,
    mul,
    no_grad,
    relu,
    sigmoid,
    stack,
    sub,
    take_rows,
    tsum,
)


@dataclass
class MaskSet:
    masks: np.ndarray  # K x H x W of {0, 1}
    present: np.ndarray  # K bools

    @property
    def num_classes(self) -> int:
        return self.masks.shape[0]

    @property
    def areas(self) -> np.ndarray:
        return self.masks.reshape(self.num_classes, -1).sum(axis=1)

    @classmethod
    def from_masks(cls, masks: np.ndarray) -> "MaskSet":
        masks = (np.asarray(masks) > 0).astype(np.float64)
        return cls(masks, masks.reshape(masks.shape[0], -1).sum(axis=1) > 0)


@dataclass
class TissueGraph:
    node_features: Tensor  # K x d, after global substitution
    edges: np.ndarray  # E x 2 directed pairs (i, j), ascending
    edge_features: Tensor  # E x d
    masks: MaskSet
    boundary_ratios: np.ndarray | None = None  # E x 2 holding (b_ij, b_ji)
    edge_weights: Tensor | None = None  # E
    refined: Tensor | None = None  # K x d after message passing
    extras: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]


# -- geometry (non-differentiable) ----------------------------------------------

def dilate(mask: np.ndarray) -> np.ndarray:
    """3x3 stride-1 padded max-pool of one or more binary maps."""
    m = np.asarray(mask, dtype=np.float64)
    squeeze = m.ndim == 2
    x = m[None, None] if squeeze else m[None]
    with no_grad():
        out = F.maxpool2d(Tensor(x), 3, 1, 1).data[0]
    return out[0] if squeeze else out


def region_proposal(p: np.ndarray, tau: float = 0.5) -> MaskSet:
    """Binary masks ``maxpool3x3(p_c) > tau`` for every class of a K x H x W probability map."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"region_proposal expects K x H x W probabilities, got {p.shape}")
    masks = (dilate(p) > tau).astype(np.float64)
    return MaskSet(masks, masks.reshape(masks.shape[0], -1).sum(axis=1) > 0)


def form_edges(maskset: MaskSet) -> np.ndarray:
    """Directed pairs (i, j), i != j, of present classes whose dilated masks intersect."""
    K = maskset.num_classes
    dil = dilate(maskset.masks).reshape(K, -1) > 0
    present = np.flatnonzero(maskset.present)
    edges = []
    for i in present:
        for j in present:
            if i != j and np.any(dil[i] & dil[j]):
                edges.append((i, j))
    return np.asarray(edges, dtype=np.intp).reshape(-1, 2)


def boundary_ratio(maskset: MaskSet, i: int, j: int) -> float:
    """Fraction of class ``i``'s mask lying inside the dilation of class ``j``'s mask."""
    if not maskset.present[i]:
        raise ValueError(f"boundary ratio undefined: class {i} has an empty mask")
    mi = maskset.masks[i]
    return float((mi * dilate(maskset.masks[j])).sum() / mi.sum())


# -- order-independent differentiable kernels --------------------------------------

def rowwise_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` where every output row is computed independently of its position."""
    xd, wd = x.data, weight.data
    out = (xd[:, None, :] * wd[None, :, :]).sum(axis=-1)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "rowwise_linear")


def segment_sum(values: Tensor, segment: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets, adding sorted terms per bucket."""
    segment = np.asarray(segment, dtype=np.intp)
    v = values.data
    out = np.zeros((num_segments,) + v.shape[1:], dtype=v.dtype)
    for s in np.unique(segment):
        out[s] = np.sort(v[segment == s], axis=0).sum(axis=0)

    def bw(g):
        return (g[segment],)

    return make_result(out, (values,), bw, "segment_sum")


def masked_average(feats: Tensor, maskset: MaskSet, eps: float) -> Tensor:
    """Node embeddings ``h_c = sum(F * M_c) / (sum(M_c) + eps)`` from a d x H x W feature map."""
    d = feats.shape[0]
    f2 = feats.data.reshape(d, -1)
    m2 = maskset.masks.reshape(maskset.num_classes, -1).astype(f2.dtype)
    denom = m2.sum(axis=1) + eps
    out = np.stack([(f2 * m2[c]).sum(axis=1) for c in range(m2.shape[0])]) / denom[:, None]

    def bw(g):
        return (((g / denom[:, None]).T @ m2).reshape(feats.shape),)

    return make_result(out, (feats,), bw, "masked_average")


def project_spatial(node_emb: Tensor, maskset: MaskSet) -> Tensor:
    """``S = sum_c h_c (outer) M_c`` as a d x H x W map."""
    K, d = node_emb.shape
    hw = maskset.masks.shape[1:]
    m2 = maskset.masks.reshape(K, -1).astype(node_emb.dtype)
    terms = node_emb.data[:, :, None] * m2[:, None, :]
    out = np.sort(terms, axis=0).sum(axis=0).reshape((d,) + hw)

    def bw(g):
        return ((g.reshape(d, -1) @ m2.T).T,)

    return make_result(out, (node_emb,), bw, "project_spatial")


def substitute_global(node_emb: Tensor, maskset: MaskSet, global_emb: Tensor) -> Tensor:
    """``H' = H * P + G * (1 - P)`` with P the per-class presence broadcast over features."""
    P = maskset.present.astype(node_emb.dtype)[:, None]
    return add(mul(node_emb, P), mul(global_emb, 1.0 - P))


# -- the module ----------------------------------------------------------------------

class TissueRelationModule:
    def __init__(self, config: ModelConfig, params: ModelParams, in_channels: int):
        self.config = config
        self.params = params
        K, d, p = config.num_classes, config.node_dim, params
        declare_conv(p, "trm.psi.conv", in_channels, d, 3)
        declare_bn(p, "trm.psi.bn", d)
        p.declare("trm.global_embedding", (K, d), EMBEDDING)
        edge_in = 2 * d + (2 if config.boundary_aware_edges else 0)
        p.declare("trm.edge_mlp.fc1.weight", (d, edge_in), GLOROT, fan_in=edge_in, fan_out=d)
        p.declare("trm.edge_mlp.fc1.bias", (d,), ZEROS)
        p.declare("trm.edge_mlp.fc2.weight", (d, d), GLOROT, fan_in=d, fan_out=d)
        p.declare("trm.edge_mlp.fc2.bias", (d,), ZEROS)
        if config.use_edge_weights:
            p.declare("trm.edge_weight.W", (d, d), GLOROT, fan_in=d, fan_out=d)
        hid = config.ffn_hidden
        for layer in range(config.gnn_layers):
            pre = f"trm.gnn.layer{layer}"
            p.declare(f"{pre}.W", (d, d), GLOROT, fan_in=d, fan_out=d)
            if config.gnn_variant == "simple":
                p.declare(f"{pre}.bias", (d,), ZEROS)
            else:
                p.declare(f"{pre}.q", (2 * d,), GLOROT, fan_in=2 * d, fan_out=1)
                p.declare(f"{pre}.ln1.weight", (d,), ONES)
                p.declare(f"{pre}.ln1.bias", (d,), ZEROS)
                p.declare(f"{pre}.ffn.fc1.weight", (hid, d), GLOROT, fan_in=d, fan_out=hid)
                p.declare(f"{pre}.ffn.fc1.bias", (hid,), ZEROS)
                p.declare(f"{pre}.ffn.fc2.weight", (d, hid), GLOROT, fan_in=hid, fan_out=d)
                p.declare(f"{pre}.ffn.fc2.bias", (d,), ZEROS)
                p.declare(f"{pre}.ln2.weight", (d,), ONES)
                p.declare(f"{pre}.ln2.bias", (d,), ZEROS)
        declare_conv(p, "trm.fuse.conv", d, in_channels, 1)
        declare_bn(p, "trm.fuse.bn", in_channels)

    # graph pieces --------------------------------------------------------------
    def feature_projection(self, d2: Tensor, training: bool) -> Tensor:
        return relu(bn(self.params, "trm.psi.bn", conv(self.params, "trm.psi.conv", d2), training))

    def extract_node_features(self, d2: Tensor, maskset: MaskSet, training: bool) -> Tensor:
        """Node embeddings for a single-image (1 x C x H x W) decoder map."""
        feats = self.feature_projection(d2, training)
        return masked_average(feats[0], maskset, self.config.pool_eps)

    def edge_mlp(self, node_emb: Tensor, edges: np.ndarray, ratios: np.ndarray | None = None) -> Tensor:
        p = self.params
        inp = concat([take_rows(node_emb, edges[:, 0]), take_rows(node_emb, edges[:, 1])], axis=-1)
        if self.config.boundary_aware_edges:
            if ratios is None:
                raise ValueError("boundary-aware edges need boundary ratios")
            inp = concat([inp, Tensor(ratios.astype(node_emb.dtype))], axis=-1)
        h = relu(rowwise_linear(inp, p["trm.edge_mlp.fc1.weight"], p["trm.edge_mlp.fc1.bias"]))
        return rowwise_linear(h, p["trm.edge_mlp.fc2.weight"], p["trm.edge_mlp.fc2.bias"])

    def edge_weight(self, edge_feats: Tensor) -> Tensor:
        """``w_ij = sigmoid(e_ij^T W e_ij)`` per directed edge."""
        quad = tsum(mul(rowwise_linear(edge_feats, self.params["trm.edge_weight.W"].T), edge_feats), axis=-1)
        return sigmoid(quad)

    def build_graph(self, feats: Tensor, maskset: MaskSet) -> TissueGraph:
        """Graph for one image from its projected d x H x W features and masks."""
        cfg = self.config
        h = masked_average(feats, maskset, cfg.pool_eps)
        h = substitute_global(h, maskset, self.params["trm.global_embedding"])
        edges = form_edges(maskset)
        ratios = None
        if cfg.boundary_aware_edges:
            ratios = np.array(
                [(boundary_ratio(maskset, i, j), boundary_ratio(maskset, j, i)) for i, j in edges],
                dtype=np.float64,
            ).reshape(-1, 2)
        e = self.edge_mlp(h, edges, ratios)
        w = self.edge_weight(e) if cfg.use_edge_weights else None
        return TissueGraph(h, edges, e, maskset, ratios, w)

    # message passing -------------------------------------------------------------
    def _messages(self, layer: int, h: Tensor, graph: TissueGraph) -> tuple[Tensor, Tensor]:
        wh = rowwise_linear(h, self.params[f"trm.gnn.layer{layer}.W"])
        src = graph.edges[:, 0]
        msg = mul(take_rows(wh, src), graph.edge_features)
        if graph.edge_weights is not None:
            msg = mul(msg, graph.edge_weights.reshape(-1, 1))
        return wh, msg

    def gnn_layer_simple(self, layer: int, h: Tensor, graph: TissueGraph) -> Tensor:
        """``h_i <- ReLU(sum_{j in N(i)} W h_j * e_ji + b)``."""
        _, msg = self._messages(layer, h, graph)
        agg = segment_sum(msg, graph.edges[:, 1], h.shape[0])
        return relu(add(agg, self.params[f"trm.gnn.layer{layer}.bias"]))

    def attention_coefficients(self, layer: int, wh: Tensor, graph: TissueGraph) -> Tensor:
        """Softmax over each node's in-neighbors of ``LeakyReLU(q . [W h_i || W h_j])``."""
        K, d = wh.shape
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        q = self.params[f"trm.gnn.layer{layer}.q"]
        own = tsum(mul(wh, q[:d]), axis=-1)
        nbr = tsum(mul(wh, q[d:]), axis=-1)
        logits = leaky_relu(add(take_rows(own, dst), take_rows(nbr, src)), self.config.attention_slope)
        # per-node max shift keeps exp() bounded; softmax is invariant to it
        shift = np.full(K, -np.inf, dtype=wh.dtype)
        np.maximum.at(shift, dst, logits.data)
        shift[np.isinf(shift)] = 0.0
        ex = exp(sub(logits, shift[dst]))
        denom = segment_sum(ex.reshape(-1, 1), dst, K).reshape(-1)
        return ex / take_rows(denom, dst)

    def gnn_layer_attention(self, layer: int, h: Tensor, graph: TissueGraph) -> Tensor:
        """``h~ = LN(h + sum_j a_ij (W h_j * e_ji))``; ``h' = LN(h~ + FFN(h~))``."""
        p, pre = self.params, f"trm.gnn.layer{layer}"
        wh, msg = self._messages(layer, h, graph)
        alpha = self.attention_coefficients(layer, wh, graph)
        agg = segment_sum(mul(msg, alpha.reshape(-1, 1)), graph.edges[:, 1], h.shape[0])
        ht = F.layer_norm(add(h, agg), p[f"{pre}.ln1.weight"], p[f"{pre}.ln1.bias"])
        ff = relu(rowwise_linear(ht, p[f"{pre}.ffn.fc1.weight"], p[f"{pre}.ffn.fc1.bias"]))
        ff = rowwise_linear(ff, p[f"{pre}.ffn.fc2.weight"], p[f"{pre}.ffn.fc2.bias"])
        return F.layer_norm(add(ht, ff), p[f"{pre}.ln2.weight"], p[f"{pre}.ln2.bias"])

    def gnn_layer(self, layer: int, h: Tensor, graph: TissueGraph) -> Tensor:
        if self.config.gnn_variant == "simple":
            return self.gnn_layer_simple(layer, h, graph)
        return self.gnn_layer_attention(layer, h, graph)

    def run_gnn(self, graph: TissueGraph) -> Tensor:
        h = graph.node_features
        for layer in range(self.config.gnn_layers):
            h = self.gnn_layer(layer, h, graph)
        graph.refined = h
        return h

    # projection and fusion ---------------------------------------------------
    def fuse(self, d2: Tensor, spatial: Tensor, training: bool) -> Tensor:
        """``D2' = D2 + BN(Conv1x1(S))``."""
        proj = bn(self.params, "trm.fuse.bn", conv(self.params, "trm.fuse.conv", spatial), training)
        return add(d2, proj)

    def forward(self, probs: Tensor | np.ndarray, d2: Tensor, training: bool) -> tuple[Tensor, list[TissueGraph]]:
        """Refine a B x C x H2 x W2 decoder map given B x K x H2 x W2 class probabilities."""
        pd = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
        if pd.shape[0] != d2.shape[0] or pd.shape[2:] != d2.shape[2:]:
            raise ValueError(f"probabilities {pd.shape} do not match decoder features {d2.shape}")
        feats = self.feature_projection(d2, training)
        graphs, maps = [], []
        for b in range(d2.shape[0]):
            maskset = region_proposal(pd[b], self.config.tau)
            graph = self.build_graph(feats[b], maskset)
            refined = self.run_gnn(graph)
            graph.refined = refined
            maps.append(project_spatial(refined, maskset))
            graphs.append(graph)
        spatial = stack(maps, axis=0)
        return self.fuse(d2, spatial, training), graphs
