"""Self-supervised objectives: adaptive augmentation and the four losses.

Augmentation drops intra-entity edges with probability decreasing in edge
weight and masks raw-feature slots with probability decreasing in a
degree-weighted importance score. The losses are the two intra-entity
NT-Xent terms, a segment-parcel discriminator term, and a parcel-city
discriminator term, fused with per-task weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import MapEncoder, edge_tensors, full_edge_set
from .graphs import MapGraph, WeightedEdgeList


@dataclass(frozen=True)
class ViewConfig:
    p_edge: float = 0.3
    p_feature: float = 0.4


@dataclass(frozen=True)
class AugmentationConfig:
    view1: ViewConfig = ViewConfig(p_edge=0.3, p_feature=0.4)
    view2: ViewConfig = ViewConfig(p_edge=0.4, p_feature=0.3)
    p_truncate: float = 0.7

    def __post_init__(self):
        for p in (self.view1.p_edge, self.view1.p_feature,
                  self.view2.p_edge, self.view2.p_feature, self.p_truncate):
            if not (0.0 <= p <= 1.0):
                raise ValueError("augmentation probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class LossWeights:
    intra_segment: float = 0.25
    intra_parcel: float = 0.25
    segment_parcel: float = 0.25
    city: float = 0.25
    temperature: float = 0.4

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.intra_segment, self.intra_parcel,
               self.segment_parcel, self.city) < 0:
            raise ValueError("loss weights must be non-negative")


def edge_removal_probs(weights: np.ndarray, p_edge: float,
                       p_truncate: float) -> np.ndarray:
    """Per-edge removal probability min((1 - w) * p_e, p_tau)."""
    return np.minimum((1.0 - np.asarray(weights, dtype=float)) * p_edge, p_truncate)


def feature_importance(x: np.ndarray, degrees: np.ndarray) -> np.ndarray:
    """Degree-weighted mean-magnitude importance per feature slot.

    c_k = sum_i |x[i, k]| * degree[i], min-max normalized to [0, 1]; a
    degenerate all-equal score normalizes to all-ones.
    """
    c = (np.abs(x) * np.asarray(degrees, dtype=float)[:, None]).sum(axis=0)
    if c.size == 0:
        return c
    lo, hi = c.min(), c.max()
    if hi == lo:
        return np.ones_like(c)
    return (c - lo) / (hi - lo)


def feature_mask_probs(c: np.ndarray, p_feature: float,
                       p_truncate: float) -> np.ndarray:
    """Per-slot mask probability min((1 - c) * p_n, p_tau)."""
    return np.minimum((1.0 - np.asarray(c, dtype=float)) * p_feature, p_truncate)


@dataclass
class AugmentedView:
    """Intra-entity edges after stochastic removal plus per-slot feature masks.

    The assignment relation and its geometry are never touched.
    """

    edges: dict[str, WeightedEdgeList]
    segment_mask: np.ndarray  # bool (D_S,)
    parcel_mask: np.ndarray  # bool (D_R,)
    removed: dict[str, np.ndarray] = field(default_factory=dict)

    def edge_tensors_with_sr(self, graph: MapGraph) -> dict[str, tuple]:
        return edge_tensors({**self.edges, "sr": graph.sr_edges()})


def feature_slot_magnitudes(encoder: MapEncoder, graph: MapGraph,
                            entity_type: str) -> np.ndarray:
    """Mean absolute embedded value per raw-feature slot, per entity.

    This is the per-slot summary of the feature-encoder input representations
    that the importance score aggregates.
    """
    if entity_type == "segment":
        enc = encoder.segment_features_enc
        feats = torch.as_tensor(graph.segment_features, dtype=torch.float64)
    else:
        enc = encoder.parcel_features_enc
        feats = torch.as_tensor(graph.parcel_features, dtype=torch.float64)
    out = np.zeros((feats.shape[0], len(enc.kinds)))
    with torch.no_grad():
        for i, kind in enumerate(enc.kinds):
            if kind == "categorical":
                emb = enc.cat_embeds[str(i)](feats[:, i].long())
            else:
                z = (feats[:, i] - enc.feat_mean[i]) / enc.feat_std[i]
                emb = z[:, None] * getattr(enc, f"cont_{i}")[None, :]
            out[:, i] = emb.abs().mean(dim=1).numpy()
    return out


def augment(graph: MapGraph, view_cfg: ViewConfig, p_truncate: float,
            generator: torch.Generator,
            importance: dict[str, np.ndarray] | None = None) -> AugmentedView:
    """Sample one augmented view of the intra-entity graphs.

    ``importance`` maps entity type to per-slot importance scores; when absent
    (e.g. without a feature encoder) features are masked with flat probability
    min(p_n, p_tau).
    """
    edges: dict[str, WeightedEdgeList] = {}
    removed: dict[str, np.ndarray] = {}
    for rel, view in graph.intra_views().items():
        if len(view) == 0:
            edges[rel] = view
            continue
        p = edge_removal_probs(view.weight, view_cfg.p_edge, p_truncate)
        draws = torch.rand(len(view), generator=generator, dtype=torch.float64).numpy()
        drop = draws < p
        edges[rel] = WeightedEdgeList(rel, view.src[~drop], view.dst[~drop],
                                      view.weight[~drop])
        removed[rel] = drop

    masks = {}
    for ent, width in (("segment", graph.segment_features.shape[1]),
                       ("parcel", graph.parcel_features.shape[1])):
        if importance is not None and ent in importance:
            p = feature_mask_probs(importance[ent], view_cfg.p_feature, p_truncate)
        else:
            p = np.full(width, min(view_cfg.p_feature, p_truncate))
        draws = torch.rand(width, generator=generator, dtype=torch.float64).numpy()
        masks[ent] = draws < p
    return AugmentedView(edges=edges, segment_mask=masks["segment"],
                         parcel_mask=masks["parcel"], removed=removed)


def compute_importance(encoder: MapEncoder, graph: MapGraph) -> dict[str, np.ndarray]:
    """Importance scores per entity type from current feature embeddings."""
    if not encoder.cfg.use_feature_encoding:
        return {}
    return {
        "segment": feature_importance(
            feature_slot_magnitudes(encoder, graph, "segment"),
            graph.segment_graph.in_degrees()),
        "parcel": feature_importance(
            feature_slot_magnitudes(encoder, graph, "parcel"),
            graph.parcel_graph.in_degrees()),
    }


class ProjectionHead(nn.Module):
    """Two-layer bias-free feed-forward map with an ELU in between."""

    def __init__(self, dim: int):
        super().__init__()
        self.w1 = nn.Linear(dim, dim, bias=False)
        self.w2 = nn.Linear(dim, dim, bias=False)
        self.double()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.w2(F.elu(self.w1(h)))


class BilinearDiscriminator(nn.Module):
    """sigmoid(a^T W b) pair scorer; raw scores exposed for stable logs."""

    def __init__(self, dim: int):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(dim, dim, dtype=torch.float64))
        nn.init.uniform_(self.w, -1.0 / dim**0.5, 1.0 / dim**0.5)

    def raw_scores(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return ((a @ self.w) * b).sum(dim=-1)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.raw_scores(a, b))


def intra_entity_loss(q1: torch.Tensor, q2: torch.Tensor,
                      temperature: float) -> torch.Tensor:
    """Symmetrized NT-Xent with inter-view and intra-view negatives.

    For anchor i in view 1 the positive is (q1_i, q2_i); the denominator sums
    exp(sim(q1_i, q2_j)/t) over all j plus exp(sim(q1_i, q1_j)/t) over j != i.
    The result is averaged over anchors and over the two view orderings.
    """

    def one_direction(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        n = a.shape[0]
        an = F.normalize(a, dim=1, eps=1e-12)
        bn = F.normalize(b, dim=1, eps=1e-12)
        inter = an @ bn.T / temperature  # sim(a_i, b_j)
        intra = an @ an.T / temperature
        pos = torch.diagonal(inter)
        intra = intra.masked_fill(torch.eye(n, dtype=torch.bool), -torch.inf)
        den = torch.logsumexp(torch.cat([inter, intra], dim=1), dim=1)
        return (den - pos).mean()

    return 0.5 * (one_direction(q1, q2) + one_direction(q2, q1))


def sample_negative_parcels(n_parcels: int, generator: torch.Generator) -> torch.Tensor:
    """One uniformly random other parcel per parcel."""
    if n_parcels < 2:
        return torch.full((n_parcels,), -1, dtype=torch.long)
    offset = torch.randint(1, n_parcels, (n_parcels,), generator=generator)
    return (torch.arange(n_parcels) + offset) % n_parcels


def segment_parcel_loss(h_seg: torch.Tensor, h_par: torch.Tensor,
                        assigned_parcel: torch.Tensor,
                        discriminator: BilinearDiscriminator,
                        negative_parcels: torch.Tensor) -> torch.Tensor:
    """Discriminator loss over (parcel, own segments) vs (parcel, other
    parcel's segments) pairs.

    With a single parcel no negative exists and the negative term is omitted.
    """
    pos_raw = discriminator.raw_scores(h_par[assigned_parcel], h_seg)
    loss = -F.logsigmoid(pos_raw).mean()
    if int(negative_parcels.numel()) and int(negative_parcels[0]) >= 0:
        seg_by_parcel: list[list[int]] = [[] for _ in range(h_par.shape[0])]
        for s, p in enumerate(assigned_parcel.tolist()):
            seg_by_parcel[p].append(s)
        anchors, segs = [], []
        for i, neg in enumerate(negative_parcels.tolist()):
            for s in seg_by_parcel[neg]:
                anchors.append(i)
                segs.append(s)
        if anchors:
            anchors_t = torch.as_tensor(anchors, dtype=torch.long)
            segs_t = torch.as_tensor(segs, dtype=torch.long)
            neg_raw = discriminator.raw_scores(h_par[anchors_t], h_seg[segs_t])
            loss = loss - F.logsigmoid(-neg_raw).mean()
    return loss


def corrupt_segment_features(features: np.ndarray,
                             generator: torch.Generator) -> np.ndarray:
    """Row-permuted copy of the segment raw feature matrix."""
    perm = torch.randperm(features.shape[0], generator=generator).numpy()
    return features[perm]


def city_loss(h_par_real: torch.Tensor, h_par_fake: torch.Tensor,
              discriminator: BilinearDiscriminator) -> torch.Tensor:
    """Parcel-city discriminator loss with corruption-derived negatives."""
    if h_par_real.shape[0] == 0:
        raise ValueError("city loss needs at least one parcel")
    h_city = h_par_real.mean(dim=0)
    city = h_city.expand_as(h_par_real)
    pos = F.logsigmoid(discriminator.raw_scores(h_par_real, city)).mean()
    neg = F.logsigmoid(-discriminator.raw_scores(h_par_fake, city)).mean()
    return -(pos + neg)


def total_loss(components: dict[str, torch.Tensor],
               weights: LossWeights) -> torch.Tensor:
    return (weights.intra_segment * components["intra_segment"]
            + weights.intra_parcel * components["intra_parcel"]
            + weights.segment_parcel * components["segment_parcel"]
            + weights.city * components["city"])
