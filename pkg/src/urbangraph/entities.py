"""Domain types for map entities and flat-file ingestion.

A city is a :class:`MapBundle`: road segments, land parcels, POIs, and
segment-based trajectories, plus the feature schemas needed to interpret the
raw feature vectors. Bundles round-trip through a directory of CSV/JSONL files
(see :func:`save_bundle` / :func:`load_bundle`).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry

OTHER = "other"

EARTH_RADIUS_M = 6_371_000.0


class BundleLoadError(Exception):
    """A required input file is missing or malformed."""


class BundleValidationError(Exception):
    """Cross-references in a bundle do not resolve."""


@dataclass(frozen=True)
class FeatureField:
    """One slot of a raw feature vector."""

    name: str
    kind: str  # "categorical" | "continuous"
    cardinality: int | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "categorical" and not self.cardinality:
            raise ValueError(f"categorical field {self.name!r} needs a cardinality")


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[FeatureField, ...]

    def __len__(self) -> int:
        return len(self.fields)

    def index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise KeyError(name)

    def drop(self, names: tuple[str, ...]) -> "FeatureSchema":
        return FeatureSchema(tuple(f for f in self.fields if f.name not in names))


@dataclass
class RoadSegment:
    id: int
    polyline: np.ndarray  # (K, 2) meters
    midpoint: np.ndarray  # arc-length midpoint
    raw_features: np.ndarray  # (D_S,), categorical slots hold integer codes

    def __post_init__(self):
        if len(self.polyline) < 2:
            raise BundleValidationError(f"segment {self.id}: polyline needs >= 2 points")


@dataclass
class LandParcel:
    id: int
    polygon: np.ndarray  # closed ring (K, 2) meters
    centroid: np.ndarray
    raw_features: np.ndarray  # (D_R,)

    def __post_init__(self):
        if not np.allclose(self.polygon[0], self.polygon[-1]):
            raise BundleValidationError(f"parcel {self.id}: ring is not closed")


@dataclass
class POI:
    id: int
    location: np.ndarray  # (2,) meters
    category: int


@dataclass
class SegmentTrajectory:
    id: int
    segment_ids: list[int]


#: Raw feature layout for road segments (category code first).
SEGMENT_FEATURES = ("category", "length", "lanes", "max_speed", "lon", "lat")
#: Raw feature layout for land parcels.
PARCEL_FEATURES = ("function", "cbd_flag", "n_buildings", "avg_floors", "area", "lon", "lat")


def segment_schema(category_vocab: list[str]) -> FeatureSchema:
    return FeatureSchema((
        FeatureField("category", "categorical", len(category_vocab)),
        FeatureField("length", "continuous"),
        FeatureField("lanes", "continuous"),
        FeatureField("max_speed", "continuous"),
        FeatureField("lon", "continuous"),
        FeatureField("lat", "continuous"),
    ))


def parcel_schema(function_vocab: list[str]) -> FeatureSchema:
    return FeatureSchema((
        FeatureField("function", "categorical", len(function_vocab)),
        FeatureField("cbd_flag", "categorical", 2),
        FeatureField("n_buildings", "continuous"),
        FeatureField("avg_floors", "continuous"),
        FeatureField("area", "continuous"),
        FeatureField("lon", "continuous"),
        FeatureField("lat", "continuous"),
    ))


@dataclass
class MapBundle:
    segments: list[RoadSegment]
    parcels: list[LandParcel]
    pois: list[POI]
    trajectories: list[SegmentTrajectory]
    segment_schema: FeatureSchema
    parcel_schema: FeatureSchema
    segment_category_vocab: list[str] = field(default_factory=list)
    parcel_function_vocab: list[str] = field(default_factory=list)
    poi_category_vocab: list[str] = field(default_factory=list)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def n_parcels(self) -> int:
        return len(self.parcels)

    def segment_feature_matrix(self) -> np.ndarray:
        return np.stack([s.raw_features for s in self.segments]) if self.segments \
            else np.zeros((0, len(self.segment_schema)))

    def parcel_feature_matrix(self) -> np.ndarray:
        return np.stack([p.raw_features for p in self.parcels]) if self.parcels \
            else np.zeros((0, len(self.parcel_schema)))

    def validate(self) -> None:
        for name, items in (("segment", self.segments), ("parcel", self.parcels),
                            ("poi", self.pois), ("trajectory", self.trajectories)):
            for i, item in enumerate(items):
                if item.id != i:
                    raise BundleValidationError(
                        f"{name} ids are not dense: position {i} holds id {item.id}")
        n = self.n_segments
        dangling = sorted({
            sid for t in self.trajectories for sid in t.segment_ids
            if not (0 <= sid < n)
        })
        if dangling:
            raise BundleValidationError(
                f"trajectories reference unknown segment ids: {dangling}")
        for t in self.trajectories:
            if len(t.segment_ids) < 2:
                raise BundleValidationError(
                    f"trajectory {t.id} has fewer than 2 segments")
        for p in self.pois:
            if not (0 <= p.category < len(self.poi_category_vocab)):
                raise BundleValidationError(
                    f"poi {p.id} category {p.category} outside vocabulary")


def snap_point_to_segment(point, segments: list[RoadSegment]) -> int:
    """Id of the segment whose polyline is nearest to the point.

    Ties break toward the lowest id.
    """
    if not segments:
        raise ValueError("cannot snap to an empty segment set")
    point = np.asarray(point, dtype=float)
    best_id, best_d = -1, math.inf
    for seg in segments:
        d = geometry.point_polyline_distance(point, seg.polyline)
        if d < best_d or (d == best_d and seg.id < best_id):
            best_id, best_d = seg.id, d
    return best_id


# ---------------------------------------------------------------------------
# WKT (only LINESTRING and POLYGON outer rings are needed)

def _coords_to_wkt(points: np.ndarray) -> str:
    return ", ".join(f"{repr(float(x))} {repr(float(y))}" for x, y in points)


def linestring_to_wkt(points: np.ndarray) -> str:
    return f"LINESTRING ({_coords_to_wkt(points)})"


def polygon_to_wkt(ring: np.ndarray) -> str:
    return f"POLYGON (({_coords_to_wkt(ring)}))"


def _parse_coords(body: str) -> np.ndarray:
    pts = []
    for pair in body.split(","):
        x, y = pair.split()
        pts.append((float(x), float(y)))
    return np.array(pts, dtype=float)


def parse_wkt_linestring(wkt: str) -> np.ndarray:
    wkt = wkt.strip()
    if not wkt.upper().startswith("LINESTRING"):
        raise BundleLoadError(f"expected LINESTRING, got {wkt[:30]!r}")
    return _parse_coords(wkt[wkt.index("(") + 1:wkt.rindex(")")])


def parse_wkt_polygon(wkt: str) -> np.ndarray:
    wkt = wkt.strip()
    if not wkt.upper().startswith("POLYGON"):
        raise BundleLoadError(f"expected POLYGON, got {wkt[:30]!r}")
    inner = wkt[wkt.index("((") + 2:wkt.index("))")]
    ring = _parse_coords(inner)
    if not np.allclose(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[0]])
    return ring


# ---------------------------------------------------------------------------
# Bundle IO

def _vocab_code(value: str, vocab: list[str]) -> int:
    try:
        return vocab.index(value)
    except ValueError:
        return vocab.index(OTHER)


def _ensure_other(vocab: list[str]) -> list[str]:
    return vocab if OTHER in vocab else vocab + [OTHER]


def _project_degrees(points: np.ndarray, lat0: float) -> np.ndarray:
    """Local equirectangular projection of (lon, lat) degrees to meters."""
    out = np.empty_like(points, dtype=float)
    out[..., 0] = np.radians(points[..., 0]) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    out[..., 1] = np.radians(points[..., 1]) * EARTH_RADIUS_M
    return out


def load_bundle(dir_path) -> MapBundle:
    """Load a bundle from a directory of flat files.

    Expects segments.csv, parcels.csv, pois.csv, trajectories.jsonl and
    vocab.json. Geometry given in degrees (``"crs": "degrees"`` in vocab.json)
    is projected to planar meters with a local equirectangular approximation.
    Unknown categorical values map to the reserved "other" code.
    """
    dir_path = Path(dir_path)
    for name in ("segments.csv", "parcels.csv", "pois.csv",
                 "trajectories.jsonl", "vocab.json"):
        if not (dir_path / name).exists():
            raise BundleLoadError(f"missing required file: {name}")

    vocab = json.loads((dir_path / "vocab.json").read_text(encoding="utf-8"))
    seg_vocab = _ensure_other(list(vocab.get("segment_category", [])))
    par_vocab = _ensure_other(list(vocab.get("parcel_function", [])))
    poi_vocab = _ensure_other(list(vocab.get("poi_category", [])))
    crs = vocab.get("crs", "meters")

    def read_rows(name):
        with open(dir_path / name, newline="", encoding="utf-8") as fh:
            yield from csv.DictReader(fh)

    raw_segments = []
    for row in read_rows("segments.csv"):
        poly = parse_wkt_linestring(row["wkt_linestring"])
        feats = np.array([
            _vocab_code(row["category"], seg_vocab),
            float(row["length_m"]), float(row["lanes"]), float(row["max_speed"]),
            float(row["lon"]), float(row["lat"]),
        ])
        raw_segments.append((int(row["id"]), poly, feats))

    raw_parcels = []
    for row in read_rows("parcels.csv"):
        ring = parse_wkt_polygon(row["wkt_polygon"])
        feats = np.array([
            _vocab_code(row["function"], par_vocab),
            float(int(row["cbd_flag"]) != 0),
            float(row["n_buildings"]), float(row["avg_floors"]),
            float(row["area_m2"]), float(row["lon"]), float(row["lat"]),
        ])
        raw_parcels.append((int(row["id"]), ring, feats))

    raw_pois = [(int(r["id"]), np.array([float(r["x"]), float(r["y"])]),
                 _vocab_code(r["category"], poi_vocab)) for r in read_rows("pois.csv")]

    trajectories = []
    with open(dir_path / "trajectories.jsonl", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            trajectories.append((int(obj["id"]), [int(s) for s in obj["segment_ids"]]))

    if crs == "degrees":
        lats = [feats[-1] for _, _, feats in raw_segments] + \
               [feats[-1] for _, _, feats in raw_parcels]
        lat0 = float(np.mean(lats)) if lats else 0.0
        raw_segments = [(i, _project_degrees(p, lat0), f) for i, p, f in raw_segments]
        raw_parcels = [(i, _project_degrees(r, lat0), f) for i, r, f in raw_parcels]
        raw_pois = [(i, _project_degrees(loc, lat0), c) for i, loc, c in raw_pois]

    # Remap ids to dense 0..N-1 in original-id order.
    raw_segments.sort(key=lambda t: t[0])
    raw_parcels.sort(key=lambda t: t[0])
    raw_pois.sort(key=lambda t: t[0])
    trajectories.sort(key=lambda t: t[0])
    seg_id_map = {old: new for new, (old, _, _) in enumerate(raw_segments)}

    segments = [
        RoadSegment(new, poly, geometry.arc_midpoint(poly), feats)
        for new, (_, poly, feats) in enumerate(raw_segments)
    ]
    parcels = [
        LandParcel(new, ring, geometry.polygon_centroid(ring), feats)
        for new, (_, ring, feats) in enumerate(raw_parcels)
    ]
    pois = [POI(new, loc, cat) for new, (_, loc, cat) in enumerate(raw_pois)]

    mapped_trajectories = []
    dangling = set()
    for new, (_, sids) in enumerate(trajectories):
        for sid in sids:
            if sid not in seg_id_map:
                dangling.add(sid)
        mapped_trajectories.append(
            SegmentTrajectory(new, [seg_id_map.get(s, -1) for s in sids]))
    if dangling:
        raise BundleValidationError(
            f"trajectories reference unknown segment ids: {sorted(dangling)}")

    bundle = MapBundle(
        segments=segments, parcels=parcels, pois=pois,
        trajectories=mapped_trajectories,
        segment_schema=segment_schema(seg_vocab),
        parcel_schema=parcel_schema(par_vocab),
        segment_category_vocab=seg_vocab,
        parcel_function_vocab=par_vocab,
        poi_category_vocab=poi_vocab,
    )
    bundle.validate()
    return bundle


def save_bundle(bundle: MapBundle, dir_path) -> None:
    """Write a bundle in the flat-file layout read by :func:`load_bundle`."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    def fmt(x: float) -> str:
        f = float(x)
        return str(int(f)) if f == int(f) else repr(f)

    with open(dir_path / "segments.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "wkt_linestring", "category", "length_m", "lanes",
                    "max_speed", "lon", "lat"])
        for s in bundle.segments:
            cat, length, lanes, speed, lon, lat = s.raw_features
            w.writerow([s.id, linestring_to_wkt(s.polyline),
                        bundle.segment_category_vocab[int(cat)],
                        fmt(length), fmt(lanes), fmt(speed), fmt(lon), fmt(lat)])

    with open(dir_path / "parcels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "wkt_polygon", "function", "cbd_flag", "n_buildings",
                    "avg_floors", "area_m2", "lon", "lat"])
        for p in bundle.parcels:
            fn, cbd, nb, fl, area, lon, lat = p.raw_features
            w.writerow([p.id, polygon_to_wkt(p.polygon),
                        bundle.parcel_function_vocab[int(fn)], int(cbd),
                        fmt(nb), fmt(fl), fmt(area), fmt(lon), fmt(lat)])

    with open(dir_path / "pois.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "category"])
        for p in bundle.pois:
            w.writerow([p.id, repr(float(p.location[0])), repr(float(p.location[1])),
                        bundle.poi_category_vocab[p.category]])

    with open(dir_path / "trajectories.jsonl", "w", encoding="utf-8") as fh:
        for t in bundle.trajectories:
            fh.write(json.dumps({"id": t.id, "segment_ids": t.segment_ids}) + "\n")

    (dir_path / "vocab.json").write_text(json.dumps({
        "segment_category": bundle.segment_category_vocab,
        "parcel_function": bundle.parcel_function_vocab,
        "poi_category": bundle.poi_category_vocab,
        "crs": "meters",
    }, indent=2), encoding="utf-8")
