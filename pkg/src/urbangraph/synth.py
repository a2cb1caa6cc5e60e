"""Seeded synthetic city generator.

Produces a grid road network whose cells are land parcels with planted
function classes. POI categories and trajectory routes are conditioned on the
planted classes, so downstream probes have a recoverable signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .entities import (
    POI,
    LandParcel,
    MapBundle,
    OTHER,
    RoadSegment,
    SegmentTrajectory,
    parcel_schema,
    segment_schema,
)

#: Probability mass a parcel's POIs place on its own class's categories.
POI_CLASS_AFFINITY = 0.8
#: Walk bias toward neighbor segments of the same planted category.
WALK_SAME_CLASS_BIAS = 3.0


@dataclass(frozen=True)
class SynthSpec:
    grid_w: int
    grid_h: int
    cell_size_m: float = 100.0
    n_pois: int = 0
    n_trajectories: int = 0
    n_function_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.grid_w < 2 or self.grid_h < 2:
            raise ValueError("grid must be at least 2x2")
        if self.n_function_classes < 1:
            raise ValueError("need at least one function class")


def expected_segment_count(spec: SynthSpec) -> int:
    return spec.grid_h * (spec.grid_w + 1) + spec.grid_w * (spec.grid_h + 1)


def _cell_class(ix: int, spec: SynthSpec) -> int:
    # Classes are planted as vertical strips across the grid.
    return min(spec.n_function_classes - 1, ix * spec.n_function_classes // spec.grid_w)


def generate_synthetic_city(spec: SynthSpec) -> MapBundle:
    """Deterministically generate a planted grid city for the given spec."""
    rng = np.random.default_rng(spec.seed)
    w, h, cell = spec.grid_w, spec.grid_h, float(spec.cell_size_m)
    n_classes = spec.n_function_classes

    class_names = [f"class_{c}" for c in range(n_classes)] + [OTHER]
    poi_vocab = [f"poi_{c}_{j}" for c in range(n_classes) for j in range(3)] + [OTHER]

    # Parcels: one per cell, column-major (ix, iy).
    parcels: list[LandParcel] = []
    parcel_class: list[int] = []
    for ix in range(w):
        for iy in range(h):
            x0, y0 = ix * cell, iy * cell
            ring = np.array([[x0, y0], [x0 + cell, y0], [x0 + cell, y0 + cell],
                             [x0, y0 + cell], [x0, y0]], dtype=float)
            centroid = geometry.polygon_centroid(ring)
            klass = _cell_class(ix, spec)
            parcel_class.append(klass)
            cbd = float(abs(ix - w / 2) <= w / 4 and abs(iy - h / 2) <= h / 4)
            feats = np.array([
                float(klass), cbd,
                float(rng.poisson(5 + 3 * klass)),
                float(rng.integers(1, 12)),
                cell * cell, centroid[0], centroid[1],
            ])
            parcels.append(LandParcel(len(parcels), ring, centroid, feats))

    def parcel_index(ix, iy):
        return ix * h + iy

    # Segments: all unit grid edges; horizontal rows first, then vertical columns.
    segments: list[RoadSegment] = []
    seg_class: list[int] = []

    def add_segment(p0, p1, adj_cells):
        poly = np.array([p0, p1], dtype=float)
        mid = geometry.arc_midpoint(poly)
        klass = parcel_class[min(adj_cells)]
        seg_class.append(klass)
        feats = np.array([
            float(klass), geometry.polyline_length(poly),
            float(rng.integers(1, 5)), float(rng.choice([30.0, 50.0, 80.0])),
            mid[0], mid[1],
        ])
        segments.append(RoadSegment(len(segments), poly, mid, feats))

    for iy in range(h + 1):
        for ix in range(w):
            cells = [parcel_index(ix, cy) for cy in (iy - 1, iy) if 0 <= cy < h]
            add_segment((ix * cell, iy * cell), ((ix + 1) * cell, iy * cell), cells)
    for ix in range(w + 1):
        for iy in range(h):
            cells = [parcel_index(cx, iy) for cx in (ix - 1, ix) if 0 <= cx < w]
            add_segment((ix * cell, iy * cell), (ix * cell, (iy + 1) * cell), cells)

    # POIs: uniform parcel choice, uniform position in the cell, category
    # distribution concentrated on the parcel's class.
    n_poi_cats = len(poi_vocab) - 1
    pois: list[POI] = []
    for i in range(spec.n_pois):
        pid = int(rng.integers(0, len(parcels)))
        ring = parcels[pid].polygon
        x = rng.uniform(ring[0, 0], ring[1, 0])
        y = rng.uniform(ring[0, 1], ring[2, 1])
        klass = parcel_class[pid]
        probs = np.full(n_poi_cats, (1.0 - POI_CLASS_AFFINITY) / max(n_poi_cats - 3, 1))
        probs[3 * klass:3 * klass + 3] = POI_CLASS_AFFINITY / 3.0
        if n_poi_cats <= 3:
            probs[:] = 1.0 / n_poi_cats
        probs /= probs.sum()
        cat = int(rng.choice(n_poi_cats, p=probs))
        pois.append(POI(i, np.array([x, y]), cat))

    # Segment adjacency via shared endpoints, for the trajectory walk.
    endpoint_index: dict[tuple[float, float], list[int]] = {}
    for s in segments:
        for pt in (s.polyline[0], s.polyline[-1]):
            endpoint_index.setdefault((round(pt[0], 6), round(pt[1], 6)), []).append(s.id)
    neighbors: list[list[int]] = [[] for _ in segments]
    for ids in endpoint_index.values():
        for a in ids:
            for b in ids:
                if a != b and b not in neighbors[a]:
                    neighbors[a].append(b)
    for lst in neighbors:
        lst.sort()

    trajectories: list[SegmentTrajectory] = []
    for i in range(spec.n_trajectories):
        cur = int(rng.integers(0, len(segments)))
        walk = [cur]
        length = int(rng.integers(3, 11))
        for _ in range(length - 1):
            options = neighbors[cur]
            if len(walk) >= 2:
                options = [n for n in options if n != walk[-2]] or neighbors[cur]
            if not options:
                break
            weights = np.array([
                WALK_SAME_CLASS_BIAS if seg_class[n] == seg_class[cur] else 1.0
                for n in options
            ])
            cur = int(options[int(rng.choice(len(options), p=weights / weights.sum()))])
            walk.append(cur)
        if len(walk) >= 2:
            trajectories.append(SegmentTrajectory(len(trajectories), walk))

    bundle = MapBundle(
        segments=segments, parcels=parcels, pois=pois, trajectories=trajectories,
        segment_schema=segment_schema(class_names),
        parcel_schema=parcel_schema(class_names),
        segment_category_vocab=class_names,
        parcel_function_vocab=class_names,
        poi_category_vocab=poi_vocab,
    )
    bundle.validate()
    return bundle
