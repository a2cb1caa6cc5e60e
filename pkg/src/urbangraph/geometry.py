"""Planar geometry helpers for map entities.

All coordinates are (x, y) in meters. Polylines are (K, 2) arrays with K >= 2;
polygon rings are closed (first point equals last).
"""

from __future__ import annotations

import math

import numpy as np


def polyline_length(points: np.ndarray) -> float:
    """Total arc length of a polyline."""
    diffs = np.diff(points, axis=0)
    return float(np.sqrt((diffs**2).sum(axis=1)).sum())


def arc_midpoint(points: np.ndarray) -> np.ndarray:
    """Point at half the arc length of a polyline."""
    diffs = np.diff(points, axis=0)
    seg_len = np.sqrt((diffs**2).sum(axis=1))
    total = seg_len.sum()
    if total == 0.0:
        return points[0].astype(float).copy()
    half = total / 2.0
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    i = int(np.searchsorted(cum, half, side="right") - 1)
    i = min(i, len(seg_len) - 1)
    t = (half - cum[i]) / seg_len[i] if seg_len[i] > 0 else 0.0
    return points[i] + t * (points[i + 1] - points[i])


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Distance from point p to the line segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    proj = a + t * ab
    return float(np.hypot(*(p - proj)))


def point_polyline_distance(p: np.ndarray, points: np.ndarray) -> float:
    """Minimum distance from point p to any segment of a polyline."""
    p = np.asarray(p, dtype=float)
    return min(
        point_segment_distance(p, points[i], points[i + 1])
        for i in range(len(points) - 1)
    )


def polygon_area(ring: np.ndarray) -> float:
    """Unsigned shoelace area of a closed ring."""
    x, y = ring[:-1, 0], ring[:-1, 1]
    xn, yn = ring[1:, 0], ring[1:, 1]
    return abs(float(np.sum(x * yn - xn * y))) / 2.0


def polygon_centroid(ring: np.ndarray) -> np.ndarray:
    """Area centroid of a closed ring; falls back to vertex mean for zero area."""
    x, y = ring[:-1, 0], ring[:-1, 1]
    xn, yn = ring[1:, 0], ring[1:, 1]
    cross = x * yn - xn * y
    a = float(np.sum(cross)) / 2.0
    if a == 0.0:
        return ring[:-1].mean(axis=0)
    cx = float(np.sum((x + xn) * cross)) / (6.0 * a)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * a)
    return np.array([cx, cy])


def point_in_polygon(p: np.ndarray, ring: np.ndarray) -> bool:
    """Ray-casting containment test; boundary points count as inside."""
    x, y = float(p[0]), float(p[1])
    inside = False
    n = len(ring) - 1
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[i + 1]
        if point_segment_distance(np.array([x, y]), ring[i], ring[i + 1]) == 0.0:
            return True
        if (y1 > y) != (y2 > y):
            x_cross = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
            if x < x_cross:
                inside = not inside
    return inside


def direction_angle(src: np.ndarray, dst: np.ndarray) -> float:
    """Angle of the vector src->dst, counterclockwise from +x, in [0, 2*pi)."""
    ang = math.atan2(float(dst[1] - src[1]), float(dst[0] - src[0]))
    ang %= 2.0 * math.pi
    # a tiny negative atan2 result can wrap to exactly 2*pi in float
    return 0.0 if ang >= 2.0 * math.pi else ang
