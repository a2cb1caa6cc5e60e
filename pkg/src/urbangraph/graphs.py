"""Construction of the heterogeneous map-entity graph.

Each entity type (segments, parcels) gets three intra-entity weighted views:
geographic proximity, POI-based functional similarity, and trajectory-derived
mobility transition probabilities. Segments are additionally assigned each to
their nearest parcel, giving the single inter-entity relation that ties the
two node sets together.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry
from .entities import FeatureSchema, MapBundle, OTHER

SEGMENT_VIEWS = ("s_geo", "s_fun", "s_mob")
PARCEL_VIEWS = ("r_geo", "r_fun", "r_mob")
RELATIONS = SEGMENT_VIEWS + PARCEL_VIEWS + ("sr",)


class GraphAssemblyError(Exception):
    """An invariant of the assembled graph does not hold."""


@dataclass
class WeightedEdgeList:
    relation: str
    src: np.ndarray  # int array
    dst: np.ndarray
    weight: np.ndarray  # float array

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise GraphAssemblyError(f"unknown relation {self.relation!r}")
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=float)
        if not (len(self.src) == len(self.dst) == len(self.weight)):
            raise GraphAssemblyError("edge arrays must share one length")
        if len(self.src) != len(set(zip(self.src.tolist(), self.dst.tolist()))):
            raise GraphAssemblyError(
                f"{self.relation}: duplicate (src, dst) pairs")

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls, relation: str) -> "WeightedEdgeList":
        return cls(relation, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def to_dense(self, n: int, m: int | None = None) -> np.ndarray:
        mat = np.zeros((n, m if m is not None else n))
        mat[self.src, self.dst] = self.weight
        return mat


@dataclass
class MultiViewGraph:
    entity_type: str  # "segment" | "parcel"
    n_vertices: int
    views: dict[str, WeightedEdgeList]

    def in_degrees(self) -> np.ndarray:
        """Unweighted in-degree summed over the three views."""
        deg = np.zeros(self.n_vertices)
        for view in self.views.values():
            np.add.at(deg, view.dst, 1.0)
        return deg


@dataclass
class MapGraph:
    """Two typed node sets, seven typed weighted relations, raw features."""

    segment_graph: MultiViewGraph
    parcel_graph: MultiViewGraph
    assigned_parcel: np.ndarray  # (N_S,) parcel id per segment
    sr_distance: np.ndarray  # (N_S,) parcel-centroid-to-segment distance, m
    sr_angle: np.ndarray  # (N_S,) angle segment-midpoint -> parcel-centroid, rad
    segment_features: np.ndarray  # (N_S, D_S)
    parcel_features: np.ndarray  # (N_R, D_R)
    segment_schema: FeatureSchema
    parcel_schema: FeatureSchema
    config: "GraphConfig"

    @property
    def n_segments(self) -> int:
        return self.segment_graph.n_vertices

    @property
    def n_parcels(self) -> int:
        return self.parcel_graph.n_vertices

    def sr_edges(self) -> WeightedEdgeList:
        """The assignment relation, segment -> parcel direction."""
        n = self.n_segments
        return WeightedEdgeList("sr", np.arange(n), self.assigned_parcel, np.ones(n))

    def segments_of_parcel(self) -> list[np.ndarray]:
        out = [[] for _ in range(self.n_parcels)]
        for s, p in enumerate(self.assigned_parcel):
            out[p].append(s)
        return [np.array(lst, dtype=np.int64) for lst in out]

    def intra_views(self) -> dict[str, WeightedEdgeList]:
        return {**self.segment_graph.views, **self.parcel_graph.views}

    def validate(self) -> None:
        for view in self.segment_graph.views.values():
            if len(view) and (view.src.max() >= self.n_segments or view.src.min() < 0):
                raise GraphAssemblyError(f"{view.relation}: endpoint out of range")
        for view in self.parcel_graph.views.values():
            if len(view) and (view.src.max() >= self.n_parcels or view.src.min() < 0):
                raise GraphAssemblyError(f"{view.relation}: endpoint out of range")
        for rel in ("s_geo", "r_geo"):
            view = self.intra_views()[rel]
            if len(view) and (view.weight.min() < 0 or view.weight.max() > 1):
                raise GraphAssemblyError(f"{rel}: weights outside [0, 1]")
        for rel in ("s_mob", "r_mob"):
            view = self.intra_views()[rel]
            if len(view):
                sums = np.zeros(max(view.src.max() + 1, 1))
                np.add.at(sums, view.src, view.weight)
                active = sums[sums > 0]
                if len(active) and not np.allclose(active, 1.0, atol=1e-9):
                    raise GraphAssemblyError(f"{rel}: rows are not stochastic")
        if len(self.assigned_parcel) != self.n_segments:
            raise GraphAssemblyError("assignment must cover every segment exactly once")
        if len(self.assigned_parcel) and (
                self.assigned_parcel.min() < 0 or self.assigned_parcel.max() >= self.n_parcels):
            raise GraphAssemblyError("assignment references unknown parcel")


@dataclass(frozen=True)
class GraphConfig:
    epsilon: float = 1.0  # meters added to distances before inversion
    epsilon_r: float | None = None  # parcel distance cutoff; None = auto
    top_k: int = 10  # function-graph sparsification
    exclude_segment_features: tuple[str, ...] = ()
    exclude_parcel_features: tuple[str, ...] = ()


def minmax_normalize(weights: np.ndarray) -> np.ndarray:
    """Min-max over present edges; degenerate inputs normalize to all-ones."""
    if len(weights) == 0:
        return weights
    lo, hi = weights.min(), weights.max()
    if hi == lo:
        return np.ones_like(weights)
    return (weights - lo) / (hi - lo)


def segment_topology(bundle: MapBundle, tol: float = 1e-6) -> list[tuple[int, int]]:
    """Directed pairs of segments sharing a polyline endpoint (intersection)."""
    index: dict[tuple[float, float], list[int]] = {}
    decimals = max(0, round(-math.log10(tol)))
    for s in bundle.segments:
        for pt in (s.polyline[0], s.polyline[-1]):
            key = (round(float(pt[0]), decimals), round(float(pt[1]), decimals))
            index.setdefault(key, []).append(s.id)
    pairs = set()
    for ids in index.values():
        for a in ids:
            for b in ids:
                if a != b:
                    pairs.add((a, b))
    return sorted(pairs)


def build_segment_geo(bundle: MapBundle, topology: list[tuple[int, int]],
                      epsilon: float = 1.0) -> WeightedEdgeList:
    """Inverse midpoint distance between connected segments, min-max normalized."""
    if not topology:
        return WeightedEdgeList.empty("s_geo")
    mids = np.stack([s.midpoint for s in bundle.segments])
    src = np.array([a for a, _ in topology], dtype=np.int64)
    dst = np.array([b for _, b in topology], dtype=np.int64)
    dist = np.sqrt(((mids[src] - mids[dst]) ** 2).sum(axis=1))
    return WeightedEdgeList("s_geo", src, dst, minmax_normalize(1.0 / (dist + epsilon)))


def build_parcel_geo(bundle: MapBundle, epsilon: float = 1.0,
                     epsilon_r: float | None = None) -> WeightedEdgeList:
    """Inverse centroid distance between parcels within the cutoff radius."""
    n = bundle.n_parcels
    if n < 2:
        return WeightedEdgeList.empty("r_geo")
    cents = np.stack([p.centroid for p in bundle.parcels])
    diff = cents[:, None, :] - cents[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    if epsilon_r is None:
        nn = np.where(np.eye(n, dtype=bool), np.inf, dist).min(axis=1)
        epsilon_r = 2.0 * float(np.median(nn))
    src, dst = np.nonzero((dist <= epsilon_r) & ~np.eye(n, dtype=bool))
    if len(src) == 0:
        return WeightedEdgeList.empty("r_geo")
    w = minmax_normalize(1.0 / (dist[src, dst] + epsilon))
    return WeightedEdgeList("r_geo", src, dst, w)


@dataclass
class TfidfTable:
    entity_type: str
    vectors: np.ndarray  # (N, |poi vocab|)


def match_pois_to_segments(bundle: MapBundle) -> np.ndarray:
    """Nearest segment (by point-to-polyline distance) for each POI."""
    out = np.full(len(bundle.pois), -1, dtype=np.int64)
    for i, poi in enumerate(bundle.pois):
        best, best_d = -1, math.inf
        for s in bundle.segments:
            d = geometry.point_polyline_distance(poi.location, s.polyline)
            if d < best_d:
                best, best_d = s.id, d
        out[i] = best
    return out


def match_pois_to_parcels(bundle: MapBundle) -> np.ndarray:
    """Containing parcel per POI; outside points fall back to nearest centroid."""
    out = np.full(len(bundle.pois), -1, dtype=np.int64)
    cents = np.stack([p.centroid for p in bundle.parcels]) if bundle.parcels else None
    for i, poi in enumerate(bundle.pois):
        hit = -1
        for p in bundle.parcels:
            if geometry.point_in_polygon(poi.location, p.polygon):
                hit = p.id
                break
        if hit < 0 and cents is not None:
            hit = int(np.argmin(((cents - poi.location) ** 2).sum(axis=1)))
        out[i] = hit
    return out


def compute_tfidf(entity_type: str, bundle: MapBundle,
                  poi_entity: np.ndarray | None = None) -> TfidfTable:
    """TF-IDF vectors over POI categories, one document per entity.

    tf = in-document category frequency, idf = ln(N / (1 + df)), clamped >= 0.
    """
    if poi_entity is None:
        poi_entity = (match_pois_to_segments(bundle) if entity_type == "segment"
                      else match_pois_to_parcels(bundle))
    n = bundle.n_segments if entity_type == "segment" else bundle.n_parcels
    v = len(bundle.poi_category_vocab)
    counts = np.zeros((n, v))
    for poi, ent in zip(bundle.pois, poi_entity):
        if ent >= 0:
            counts[ent, poi.category] += 1
    doc_len = counts.sum(axis=1, keepdims=True)
    tf = np.divide(counts, doc_len, out=np.zeros_like(counts), where=doc_len > 0)
    df = (counts > 0).sum(axis=0)
    idf = np.log(n / (1.0 + df)) if n > 0 else np.zeros(v)
    return TfidfTable(entity_type, np.maximum(tf * idf, 0.0))


def build_function_graph(tfidf: TfidfTable, top_k: int = 10) -> WeightedEdgeList:
    """Cosine-similarity edges to each entity's top-k most similar peers.

    Zero-vector entities select no peers; non-positive similarities are
    omitted. Selected edges are emitted in both directions.
    """
    relation = "s_fun" if tfidf.entity_type == "segment" else "r_fun"
    x = tfidf.vectors
    norms = np.sqrt((x**2).sum(axis=1))
    nonzero = norms > 0
    if nonzero.sum() < 2:
        return WeightedEdgeList.empty(relation)
    unit = np.where(nonzero[:, None], x / np.maximum(norms, 1e-300)[:, None], 0.0)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    sim[~nonzero] = -np.inf
    sim[:, ~nonzero] = -np.inf
    pairs: dict[tuple[int, int], float] = {}
    for i in np.nonzero(nonzero)[0]:
        order = np.argsort(-sim[i], kind="stable")[:top_k]
        for j in order:
            if sim[i, j] > 0:
                pairs[(int(i), int(j))] = float(sim[i, j])
                pairs[(int(j), int(i))] = float(sim[i, j])
    if not pairs:
        return WeightedEdgeList.empty(relation)
    keys = sorted(pairs)
    src = np.array([k[0] for k in keys])
    dst = np.array([k[1] for k in keys])
    return WeightedEdgeList(relation, src, dst, np.array([pairs[k] for k in keys]))


def _transition_edges(relation: str, sequences: list[list[int]]) -> WeightedEdgeList:
    counts: dict[tuple[int, int], float] = {}
    totals: dict[int, float] = {}
    for seq in sequences:
        for a, b in zip(seq, seq[1:]):
            counts[(a, b)] = counts.get((a, b), 0.0) + 1.0
            totals[a] = totals.get(a, 0.0) + 1.0
    if not counts:
        return WeightedEdgeList.empty(relation)
    keys = sorted(counts)
    src = np.array([k[0] for k in keys])
    dst = np.array([k[1] for k in keys])
    w = np.array([counts[k] / totals[k[0]] for k in keys])
    return WeightedEdgeList(relation, src, dst, w)


def build_segment_mobility(bundle: MapBundle) -> WeightedEdgeList:
    """First-order transition probabilities over consecutive segment pairs."""
    return _transition_edges("s_mob", [t.segment_ids for t in bundle.trajectories])


def build_parcel_mobility(bundle: MapBundle, assigned_parcel: np.ndarray) -> WeightedEdgeList:
    """Segment trajectories mapped to parcels, duplicates collapsed, then Eq.-style
    transition probabilities."""
    sequences = []
    for t in bundle.trajectories:
        seq: list[int] = []
        for sid in t.segment_ids:
            p = int(assigned_parcel[sid])
            if not seq or seq[-1] != p:
                seq.append(p)
        sequences.append(seq)
    return _transition_edges("r_mob", sequences)


def assign_segments_to_parcels(bundle: MapBundle) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-parcel assignment per segment plus geometry side data.

    Returns (assigned_parcel, distance, angle): per segment, the parcel whose
    boundary is closest to the segment midpoint (ties to the lowest parcel
    id), the parcel-centroid-to-segment distance in meters, and the direction
    angle of the vector from segment midpoint to parcel centroid in [0, 2*pi).
    """
    if not bundle.parcels:
        raise ValueError("cannot assign segments with an empty parcel set")
    n = bundle.n_segments
    assigned = np.zeros(n, dtype=np.int64)
    dist_out = np.zeros(n)
    angle_out = np.zeros(n)
    for s in bundle.segments:
        best, best_d = -1, math.inf
        for p in bundle.parcels:
            d = geometry.point_polyline_distance(s.midpoint, p.polygon)
            if d < best_d:
                best, best_d = p.id, d
        parcel = bundle.parcels[best]
        assigned[s.id] = best
        dist_out[s.id] = geometry.point_polyline_distance(parcel.centroid, s.polyline)
        angle_out[s.id] = geometry.direction_angle(s.midpoint, parcel.centroid)
    return assigned, dist_out, angle_out


def assemble_graph(bundle: MapBundle, config: GraphConfig = GraphConfig()) -> MapGraph:
    """Build all seven relations and feature matrices, then validate."""
    topology = segment_topology(bundle)
    s_geo = build_segment_geo(bundle, topology, config.epsilon)
    r_geo = build_parcel_geo(bundle, config.epsilon, config.epsilon_r)
    s_fun = build_function_graph(compute_tfidf("segment", bundle), config.top_k)
    r_fun = build_function_graph(compute_tfidf("parcel", bundle), config.top_k)
    s_mob = build_segment_mobility(bundle)
    assigned, sr_dist, sr_angle = assign_segments_to_parcels(bundle)
    r_mob = build_parcel_mobility(bundle, assigned)

    seg_feats = bundle.segment_feature_matrix()
    par_feats = bundle.parcel_feature_matrix()
    seg_schema, par_schema = bundle.segment_schema, bundle.parcel_schema
    if config.exclude_segment_features:
        keep = [i for i, f in enumerate(seg_schema.fields)
                if f.name not in config.exclude_segment_features]
        seg_feats = seg_feats[:, keep]
        seg_schema = seg_schema.drop(config.exclude_segment_features)
    if config.exclude_parcel_features:
        keep = [i for i, f in enumerate(par_schema.fields)
                if f.name not in config.exclude_parcel_features]
        par_feats = par_feats[:, keep]
        par_schema = par_schema.drop(config.exclude_parcel_features)

    graph = MapGraph(
        segment_graph=MultiViewGraph("segment", bundle.n_segments,
                                     {"s_geo": s_geo, "s_fun": s_fun, "s_mob": s_mob}),
        parcel_graph=MultiViewGraph("parcel", bundle.n_parcels,
                                    {"r_geo": r_geo, "r_fun": r_fun, "r_mob": r_mob}),
        assigned_parcel=assigned, sr_distance=sr_dist, sr_angle=sr_angle,
        segment_features=seg_feats, parcel_features=par_feats,
        segment_schema=seg_schema, parcel_schema=par_schema,
        config=config,
    )
    graph.validate()
    return graph


# ---------------------------------------------------------------------------
# Serialization

def _schema_to_json(schema: FeatureSchema) -> list[dict]:
    return [{"name": f.name, "kind": f.kind, "cardinality": f.cardinality}
            for f in schema.fields]


def _schema_from_json(items: list[dict]) -> FeatureSchema:
    from .entities import FeatureField
    return FeatureSchema(tuple(
        FeatureField(d["name"], d["kind"], d["cardinality"]) for d in items))


def save_graph(graph: MapGraph, dir_path) -> str:
    """Write the graph as CSVs plus meta.json; returns the content hash."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()

    def write_csv(name, header, rows):
        path = dir_path / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow(row)
        digest.update(path.read_bytes())

    for ent, feats, schema in (("segments", graph.segment_features, graph.segment_schema),
                               ("parcels", graph.parcel_features, graph.parcel_schema)):
        header = ["id"] + [f.name for f in schema.fields]
        write_csv(f"nodes_{ent}.csv", header,
                  ([i] + [repr(float(v)) for v in row] for i, row in enumerate(feats)))

    for rel, view in {**graph.intra_views(), "sr": graph.sr_edges()}.items():
        write_csv(f"edges_{rel}.csv", ["src", "dst", "weight"],
                  ((int(s), int(d), repr(float(w)))
                   for s, d, w in zip(view.src, view.dst, view.weight)))

    write_csv("sr_geometry.csv", ["parcel_id", "segment_id", "distance_m", "angle_rad"],
              ((int(graph.assigned_parcel[s]), s,
                repr(float(graph.sr_distance[s])), repr(float(graph.sr_angle[s])))
               for s in range(graph.n_segments)))

    meta = {
        "n_segments": graph.n_segments,
        "n_parcels": graph.n_parcels,
        "edge_counts": {rel: len(view) for rel, view in graph.intra_views().items()},
        "config": {
            "epsilon": graph.config.epsilon,
            "epsilon_r": graph.config.epsilon_r,
            "top_k": graph.config.top_k,
            "exclude_segment_features": list(graph.config.exclude_segment_features),
            "exclude_parcel_features": list(graph.config.exclude_parcel_features),
        },
        "segment_schema": _schema_to_json(graph.segment_schema),
        "parcel_schema": _schema_to_json(graph.parcel_schema),
        "content_hash": digest.hexdigest(),
    }
    (dir_path / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return meta["content_hash"]


def load_graph(dir_path) -> MapGraph:
    dir_path = Path(dir_path)
    meta = json.loads((dir_path / "meta.json").read_text(encoding="utf-8"))

    def read_csv(name):
        with open(dir_path / name, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def read_nodes(name, width):
        rows = read_csv(name)
        mat = np.zeros((len(rows), width))
        for row in rows:
            vals = [v for k, v in row.items() if k != "id"]
            mat[int(row["id"])] = [float(v) for v in vals]
        return mat

    seg_schema = _schema_from_json(meta["segment_schema"])
    par_schema = _schema_from_json(meta["parcel_schema"])
    seg_feats = read_nodes("nodes_segments.csv", len(seg_schema))
    par_feats = read_nodes("nodes_parcels.csv", len(par_schema))

    views = {}
    for rel in RELATIONS:
        rows = read_csv(f"edges_{rel}.csv")
        if rows:
            views[rel] = WeightedEdgeList(
                rel,
                np.array([int(r["src"]) for r in rows]),
                np.array([int(r["dst"]) for r in rows]),
                np.array([float(r["weight"]) for r in rows]))
        else:
            views[rel] = WeightedEdgeList.empty(rel)

    n_s, n_r = meta["n_segments"], meta["n_parcels"]
    assigned = np.zeros(n_s, dtype=np.int64)
    sr_dist = np.zeros(n_s)
    sr_angle = np.zeros(n_s)
    for row in read_csv("sr_geometry.csv"):
        s = int(row["segment_id"])
        assigned[s] = int(row["parcel_id"])
        sr_dist[s] = float(row["distance_m"])
        sr_angle[s] = float(row["angle_rad"])

    cfg = meta["config"]
    graph = MapGraph(
        segment_graph=MultiViewGraph("segment", n_s,
                                     {k: views[k] for k in SEGMENT_VIEWS}),
        parcel_graph=MultiViewGraph("parcel", n_r,
                                    {k: views[k] for k in PARCEL_VIEWS}),
        assigned_parcel=assigned, sr_distance=sr_dist, sr_angle=sr_angle,
        segment_features=seg_feats, parcel_features=par_feats,
        segment_schema=seg_schema, parcel_schema=par_schema,
        config=GraphConfig(
            epsilon=cfg["epsilon"], epsilon_r=cfg["epsilon_r"], top_k=cfg["top_k"],
            exclude_segment_features=tuple(cfg["exclude_segment_features"]),
            exclude_parcel_features=tuple(cfg["exclude_parcel_features"])),
    )
    graph.validate()
    return graph
