"""Joint segment/parcel encoder.

Pipeline: per-feature embedding + two-layer MLP compression, parcel-over-
segment shape attention with distance/direction bias, and a stack of
heterogeneous graph transformer layers attending jointly over all seven
typed relations.

All modules run in float64 so gradient checks against central finite
differences are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .graphs import MapGraph, RELATIONS, WeightedEdgeList

NODE_TYPES = ("segment", "parcel")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 128
    n_layers: int = 2
    n_heads: int = 8
    dropout: float = 0.2
    feature_dim: int = 16  # per-raw-feature embedding width
    n_dist_buckets: int = 20
    n_angle_buckets: int = 36
    bias_dim: int = 16  # distance/angle bias embedding width
    use_feature_encoding: bool = True  # False: learned free embedding per node
    use_shape_attention: bool = True
    use_attention_bias: bool = True

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.dim < 1 or self.n_heads < 1 or self.n_layers < 0:
            raise ValueError("invalid encoder dimensions")


def graph_tensors(graph: MapGraph, device=None) -> dict[str, torch.Tensor]:
    """Static tensors the encoder needs besides edges and features."""
    return {
        "assigned_parcel": torch.as_tensor(graph.assigned_parcel, dtype=torch.long),
        "sr_distance": torch.as_tensor(graph.sr_distance, dtype=torch.float64),
        "sr_angle": torch.as_tensor(graph.sr_angle, dtype=torch.float64),
    }


def edge_tensors(views: dict[str, WeightedEdgeList]) -> dict[str, tuple]:
    """Convert edge lists to (src, dst, weight) long/double tensors."""
    out = {}
    for rel, view in views.items():
        out[rel] = (torch.as_tensor(view.src, dtype=torch.long),
                    torch.as_tensor(view.dst, dtype=torch.long),
                    torch.as_tensor(view.weight, dtype=torch.float64))
    return out


class FeatureEncoder(nn.Module):
    """Per-feature embeddings concatenated and compressed by a two-layer MLP.

    Categorical slots use table lookup; continuous slots embed as
    standardized value times a learned direction. A boolean mask over raw
    feature slots zeroes the corresponding embedding blocks (used by the
    feature-masking augmentation).
    """

    def __init__(self, schema, feats: np.ndarray, dim: int, feature_dim: int,
                 dropout: float):
        super().__init__()
        self.schema = schema
        self.kinds = [f.kind for f in schema.fields]
        embeds = []
        for i, f in enumerate(schema.fields):
            if f.kind == "categorical":
                embeds.append(nn.Embedding(f.cardinality, feature_dim))
            else:
                p = nn.Parameter(torch.empty(feature_dim))
                nn.init.uniform_(p, -1.0 / math.sqrt(feature_dim),
                                 1.0 / math.sqrt(feature_dim))
                embeds.append(None)
                self.register_parameter(f"cont_{i}", p)
        self.cat_embeds = nn.ModuleDict({
            str(i): e for i, e in enumerate(embeds) if e is not None})
        mean = feats.mean(axis=0) if len(feats) else np.zeros(len(schema))
        std = feats.std(axis=0) if len(feats) else np.ones(len(schema))
        std = np.where(std > 0, std, 1.0)
        self.register_buffer("feat_mean", torch.as_tensor(mean, dtype=torch.float64))
        self.register_buffer("feat_std", torch.as_tensor(std, dtype=torch.float64))
        self.mlp = nn.Sequential(
            nn.Linear(len(schema) * feature_dim, dim),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(dim, dim),
        )

    def forward(self, feats: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        parts = []
        for i, kind in enumerate(self.kinds):
            if kind == "categorical":
                emb = self.cat_embeds[str(i)](feats[:, i].long())
            else:
                z = (feats[:, i] - self.feat_mean[i]) / self.feat_std[i]
                emb = z[:, None] * getattr(self, f"cont_{i}")[None, :]
            if mask is not None and bool(mask[i]):
                emb = torch.zeros_like(emb)
            parts.append(emb)
        return self.mlp(torch.cat(parts, dim=1))


class ShapeAttention(nn.Module):
    """Parcel attention over its assigned segments with geometry bias.

    Scores are (x_r^T W1 x_s + w_l . l + w_d . d) / sqrt(D), softmaxed per
    parcel; the aggregate is projected and added residually to the parcel
    embedding. Segment embeddings pass through unchanged.
    """

    def __init__(self, cfg: EncoderConfig, dist_edges: torch.Tensor):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.w_pair = nn.Linear(d, d, bias=False)
        self.w_value = nn.Linear(d, d, bias=False)
        self.w_out = nn.Linear(d, d, bias=False)
        self.register_buffer("dist_edges", dist_edges)  # quantile bucket bounds
        self.dist_embed = nn.Embedding(cfg.n_dist_buckets, cfg.bias_dim)
        self.angle_embed = nn.Embedding(cfg.n_angle_buckets, cfg.bias_dim)
        self.w_dist = nn.Parameter(torch.zeros(cfg.bias_dim))
        self.w_angle = nn.Parameter(torch.zeros(cfg.bias_dim))
        nn.init.uniform_(self.w_dist, -1.0 / math.sqrt(cfg.bias_dim),
                         1.0 / math.sqrt(cfg.bias_dim))
        nn.init.uniform_(self.w_angle, -1.0 / math.sqrt(cfg.bias_dim),
                         1.0 / math.sqrt(cfg.bias_dim))
        self.attn_dropout = nn.Dropout(cfg.dropout)

    def scores(self, x_s: torch.Tensor, x_r: torch.Tensor, assigned: torch.Tensor,
               sr_distance: torch.Tensor, sr_angle: torch.Tensor) -> torch.Tensor:
        """Unnormalized per-pair attention scores, one per segment."""
        pair = (x_r[assigned] * self.w_pair(x_s)).sum(dim=1)
        if self.cfg.use_attention_bias:
            db = torch.bucketize(sr_distance, self.dist_edges)
            db = db.clamp(max=self.cfg.n_dist_buckets - 1)
            ab = (sr_angle / (2.0 * math.pi) * self.cfg.n_angle_buckets).long()
            ab = ab.clamp(min=0, max=self.cfg.n_angle_buckets - 1)
            pair = pair + self.dist_embed(db) @ self.w_dist \
                + self.angle_embed(ab) @ self.w_angle
        return pair / math.sqrt(self.cfg.dim)

    def forward(self, x_s, x_r, assigned, sr_distance, sr_angle):
        n_r = x_r.shape[0]
        alpha = self.scores(x_s, x_r, assigned, sr_distance, sr_angle)
        att = segment_softmax(alpha, assigned, n_r)
        att = self.attn_dropout(att)
        agg = torch.zeros_like(x_r)
        agg.index_add_(0, assigned, att[:, None] * self.w_value(x_s))
        return self.w_out(agg) + x_r


def segment_softmax(scores: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of scores grouped by index (numerically stabilized per group)."""
    if scores.numel() == 0:
        return scores
    maxes = torch.full((n,), -torch.inf, dtype=scores.dtype)
    maxes = maxes.scatter_reduce(0, index, scores.detach(), reduce="amax",
                                 include_self=True)
    ex = torch.exp(scores - maxes[index])
    denom = torch.zeros(n, dtype=scores.dtype).index_add_(0, index, ex)
    return ex / denom[index]


class HGTLayer(nn.Module):
    """One heterogeneous graph transformer layer.

    Type-specific node and relation projections feed per-head dot-product
    attention; the softmax for a target node runs jointly over all incoming
    typed edges, head outputs are averaged, and the node projection is added
    residually.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d, h = cfg.dim, cfg.n_heads
        self.cfg = cfg
        self.w_node = nn.ParameterDict({
            t: _init_matrix(d) for t in NODE_TYPES})
        self.w_rel = nn.ParameterDict({
            rel: _init_matrix(d) for rel in RELATIONS})
        self.w_q = nn.Parameter(_init_stack(h, d))
        self.w_k = nn.Parameter(_init_stack(h, d))
        self.w_v = nn.Parameter(_init_stack(h, d))
        self.attn_dropout = nn.Dropout(cfg.dropout)

    def forward(self, h_seg: torch.Tensor, h_par: torch.Tensor,
                edges: dict[str, tuple]) -> tuple[torch.Tensor, torch.Tensor]:
        n_s, d = h_seg.shape
        n_r = h_par.shape[0]
        n = n_s + n_r
        f_n = torch.cat([h_seg @ self.w_node["segment"].T,
                         h_par @ self.w_node["parcel"].T], dim=0)

        srcs, dsts, msgs = [], [], []
        for rel, (src, dst, w) in edges.items():
            if len(src) == 0:
                continue
            if rel in ("s_geo", "s_fun", "s_mob"):
                gsrc, gdst = src, dst
            elif rel in ("r_geo", "r_fun", "r_mob"):
                gsrc, gdst = src + n_s, dst + n_s
            elif rel == "sr":
                # assignment edges run both ways with the same relation weights
                gsrc = torch.cat([src, dst + n_s])
                gdst = torch.cat([dst + n_s, src])
                w = torch.cat([w, w])
            else:
                raise KeyError(rel)
            msg = w[:, None] * (f_n[gsrc] @ self.w_rel[rel].T)
            srcs.append(gsrc)
            dsts.append(gdst)
            msgs.append(msg)

        if not msgs:
            out = f_n
        else:
            dst_all = torch.cat(dsts)
            msg_all = torch.cat(msgs)
            scale = math.sqrt(d)
            q = torch.einsum("hij,nj->hni", self.w_q, f_n)  # (H, N, D)
            k = torch.einsum("hij,ej->hei", self.w_k, msg_all)  # (H, E, D)
            v = torch.einsum("hij,ej->hei", self.w_v, msg_all)
            head_out = torch.zeros(self.cfg.n_heads, n, d, dtype=f_n.dtype)
            for hh in range(self.cfg.n_heads):
                score = (q[hh][dst_all] * k[hh]).sum(dim=1) / scale
                alpha = segment_softmax(score, dst_all, n)
                alpha = self.attn_dropout(alpha)
                head_out[hh] = head_out[hh].index_add(0, dst_all, alpha[:, None] * v[hh])
            out = head_out.mean(dim=0) + f_n
        return out[:n_s], out[n_s:]


def _init_matrix(d: int) -> nn.Parameter:
    p = nn.Parameter(torch.empty(d, d, dtype=torch.float64))
    nn.init.uniform_(p, -1.0 / math.sqrt(d), 1.0 / math.sqrt(d))
    return p


def _init_stack(h: int, d: int) -> torch.Tensor:
    t = torch.empty(h, d, d, dtype=torch.float64)
    nn.init.uniform_(t, -1.0 / math.sqrt(d), 1.0 / math.sqrt(d))
    return t


class MapEncoder(nn.Module):
    """Full encoder: feature encoding, shape attention, stacked HGT layers."""

    def __init__(self, cfg: EncoderConfig, graph: MapGraph):
        super().__init__()
        self.cfg = cfg
        self.n_segments = graph.n_segments
        self.n_parcels = graph.n_parcels
        if cfg.use_feature_encoding:
            self.segment_features_enc = FeatureEncoder(
                graph.segment_schema, graph.segment_features, cfg.dim,
                cfg.feature_dim, cfg.dropout)
            self.parcel_features_enc = FeatureEncoder(
                graph.parcel_schema, graph.parcel_features, cfg.dim,
                cfg.feature_dim, cfg.dropout)
        else:
            self.free_segment = nn.Parameter(
                torch.randn(graph.n_segments, cfg.dim, dtype=torch.float64) * 0.1)
            self.free_parcel = nn.Parameter(
                torch.randn(graph.n_parcels, cfg.dim, dtype=torch.float64) * 0.1)
        if cfg.use_shape_attention:
            q = np.quantile(graph.sr_distance,
                            np.linspace(0, 1, cfg.n_dist_buckets + 1)[1:-1]) \
                if graph.n_segments else np.zeros(cfg.n_dist_buckets - 1)
            self.shape_attention = ShapeAttention(
                cfg, torch.as_tensor(np.atleast_1d(q), dtype=torch.float64))
        self.layers = nn.ModuleList([HGTLayer(cfg) for _ in range(cfg.n_layers)])
        self.register_buffer("assigned_parcel",
                             torch.as_tensor(graph.assigned_parcel, dtype=torch.long))
        self.register_buffer("sr_distance",
                             torch.as_tensor(graph.sr_distance, dtype=torch.float64))
        self.register_buffer("sr_angle",
                             torch.as_tensor(graph.sr_angle, dtype=torch.float64))
        self.double()

    def encode_raw(self, seg_feats: torch.Tensor, par_feats: torch.Tensor,
                   seg_mask: torch.Tensor | None = None,
                   par_mask: torch.Tensor | None = None):
        if self.cfg.use_feature_encoding:
            xs = self.segment_features_enc(seg_feats, seg_mask)
            xr = self.parcel_features_enc(par_feats, par_mask)
        else:
            xs, xr = self.free_segment, self.free_parcel
        return xs, xr

    def joint_feature_encoding(self, seg_feats, par_feats, seg_mask=None,
                               par_mask=None):
        """Raw feature encoding followed by shape attention (the JFE stage)."""
        xs, xr = self.encode_raw(seg_feats, par_feats, seg_mask, par_mask)
        if self.cfg.use_shape_attention and self.n_segments:
            xr = self.shape_attention(xs, xr, self.assigned_parcel,
                                      self.sr_distance, self.sr_angle)
        return xs, xr

    def forward(self, seg_feats: torch.Tensor, par_feats: torch.Tensor,
                edges: dict[str, tuple], seg_mask=None, par_mask=None):
        """Return (segment, parcel) representation matrices."""
        hs, hr = self.joint_feature_encoding(seg_feats, par_feats, seg_mask, par_mask)
        for layer in self.layers:
            hs, hr = layer(hs, hr, edges)
        return hs, hr


def full_edge_set(graph: MapGraph) -> dict[str, tuple]:
    """All seven relations of the un-augmented graph as tensors."""
    return edge_tensors({**graph.intra_views(), "sr": graph.sr_edges()})
