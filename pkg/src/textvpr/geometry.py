"""Polygons for text regions: area, overlap, resampling, clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Polygon", "as_vertices", "signed_area", "polygon_area", "is_convex",
    "is_simple", "canonicalize", "clip_convex", "triangulate", "polygon_iou",
    "resample_polygon", "clip_to_rect", "validate_polygon",
]


@dataclass(frozen=True, eq=False)
class Polygon:
    """Vertex ring in pixel space, or in [0, 1]^2 when ``normalized``."""

    vertices: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "vertices", v)

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        return (isinstance(other, Polygon) and self.normalized == other.normalized
                and np.array_equal(self.vertices, other.vertices))

    def scaled(self, sx, sy, normalized):
        return Polygon(self.vertices * np.array([sx, sy]), normalized)

    def tolist(self):
        return self.vertices.tolist()


def as_vertices(p):
    v = p.vertices if isinstance(p, Polygon) else np.asarray(p, dtype=np.float64).reshape(-1, 2)
    if len(v) < 3:
        raise ValueError(f"polygon needs at least 3 vertices, got {len(v)}")
    return v


def signed_area(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(p):
    """Shoelace area (absolute)."""
    return abs(signed_area(as_vertices(p)))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def is_convex(v):
    n = len(v)
    sign = 0
    for i in range(n):
        c = _cross(v[i], v[(i + 1) % n], v[(i + 2) % n])
        if c != 0:
            s = 1 if c > 0 else -1
            if sign and s != sign:
                return False
            sign = s
    return True


def _segments_cross(p1, p2, q1, q2):
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4)


def is_simple(v):
    """Segment-pair test: no two non-adjacent edges cross."""
    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return False
    return True


def validate_polygon(p):
    v = as_vertices(p)
    if not np.all(np.isfinite(v)):
        raise ValueError("polygon has non-finite coordinates")
    if signed_area(v) == 0:
        raise ValueError("polygon has zero area")
    if not is_simple(v):
        raise ValueError("polygon is self-intersecting")
    return v


def canonicalize(p):
    """Counter-clockwise ring starting at the lexicographically smallest vertex."""
    v = as_vertices(p)
    if signed_area(v) < 0:
        v = v[::-1]
    start = min(range(len(v)), key=lambda i: (v[i, 0], v[i, 1]))
    v = np.roll(v, -start, axis=0)
    if isinstance(p, Polygon):
        return Polygon(v, p.normalized)
    return v


def clip_convex(subject, clipper):
    """Sutherland-Hodgman: clip ``subject`` by the convex CCW ring ``clipper``."""
    out = [tuple(pt) for pt in subject]
    m = len(clipper)
    for i in range(m):
        if not out:
            break
        a = clipper[i]
        b = clipper[(i + 1) % m]
        inp = out
        out = []
        prev = inp[-1]
        prev_in = _cross(a, b, prev) >= 0
        for cur in inp:
            cur_in = _cross(a, b, cur) >= 0
            if cur_in != prev_in:
                out.append(_line_intersect(prev, cur, a, b))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _line_intersect(p, q, a, b):
    d1 = _cross(a, b, p)
    d2 = _cross(a, b, q)
    t = d1 / (d1 - d2)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def triangulate(v):
    """Ear-clipping triangulation of a simple CCW polygon -> list of triangles."""
    idx = list(range(len(v)))
    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10 * len(v) ** 2:
        guard += 1
        n = len(idx)
        for k in range(n):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % n]
            a, b, c = v[i0], v[i1], v[i2]
            if _cross(a, b, c) <= 0:
                continue
            if any(_in_triangle(v[j], a, b, c) for j in idx if j not in (i0, i1, i2)):
                continue
            tris.append(np.array([a, b, c]))
            idx.pop(k)
            break
        else:
            # numerically stuck (collinear run); drop a flat vertex
            idx.pop(1)
    if len(idx) == 3:
        tris.append(v[idx])
    return tris


def _in_triangle(p, a, b, c):
    return _cross(a, b, p) >= 0 and _cross(b, c, p) >= 0 and _cross(c, a, p) >= 0


def _pieces(v):
    v = canonicalize(v)
    return [v] if is_convex(v) else triangulate(v)


def _key(v):
    return tuple(v.reshape(-1).tolist())


def polygon_iou(a, b):
    """Intersection over union in [0, 1]. Zero-area inputs score 0."""
    if isinstance(a, Polygon) and isinstance(b, Polygon) and a.normalized != b.normalized:
        raise ValueError("cannot compare normalized and pixel-space polygons")
    va, vb = as_vertices(a), as_vertices(b)
    area_a, area_b = abs(signed_area(va)), abs(signed_area(vb))
    if area_a == 0 or area_b == 0:
        return 0.0
    # fixed argument order so iou(a, b) == iou(b, a) bit for bit
    if _key(va) > _key(vb):
        va, vb, area_a, area_b = vb, va, area_b, area_a
    if (va[:, 0].max() <= vb[:, 0].min() or vb[:, 0].max() <= va[:, 0].min()
            or va[:, 1].max() <= vb[:, 1].min() or vb[:, 1].max() <= va[:, 1].min()):
        return 0.0
    inter = 0.0
    for pa in _pieces(va):
        for pb in _pieces(vb):
            piece = clip_convex(pa, pb)
            if len(piece) >= 3:
                inter += abs(signed_area(piece))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def resample_polygon(p, k):
    """``k`` boundary points from the canonical start vertex, spaced by arc length.

    With ``k >= n`` vertices every vertex is kept and the ``k - n`` extra
    points go one at a time to the edge whose current spacing is longest,
    split evenly along it; corners survive, so convex area is preserved.
    With fewer points than vertices the ring is sampled at ``k`` equal
    arc-length steps.
    """
    if k < 4 or k % 2:
        raise ValueError(f"k must be even and >= 4, got {k}")
    v = canonicalize(as_vertices(p))
    ring = np.vstack([v, v[:1]])
    seg = np.hypot(*np.diff(ring, axis=0).T)
    total = seg.sum()
    if not total > 0:
        raise ValueError("degenerate polygon perimeter")
    n = len(v)
    if k >= n:
        counts = np.ones(n, dtype=np.intp)
        for _ in range(k - n):
            counts[np.argmax(seg / counts)] += 1
        j = np.repeat(np.arange(n), counts)
        t = np.concatenate([np.arange(c) / c for c in counts])
    else:
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        targets = np.arange(k) * (total / k)
        j = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, n - 1)
        t = np.where(seg[j] > 0, (targets - cum[j]) / np.where(seg[j] > 0, seg[j], 1), 0.0)
    pts = ring[j] + t[:, None] * (ring[j + 1] - ring[j])
    if isinstance(p, Polygon):
        return Polygon(pts, p.normalized)
    return pts


def clip_to_rect(p, width, height):
    """Clip a polygon to the canvas [0, width] x [0, height]."""
    v = as_vertices(p)
    if signed_area(v) < 0:
        v = v[::-1]
    rect = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    return clip_convex(v, rect)
