"""Convex polygon queries used by the simulator and the grasp oracle."""
from __future__ import annotations

import math

import numpy as np


def polygon_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(verts: np.ndarray) -> np.ndarray:
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * a)


def polygon_gyration_sq(verts: np.ndarray) -> float:
    """Squared radius of gyration about the local origin (uniform lamina)."""
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    polar = (cross * (x * x + x * xn + xn * xn + y * y + y * yn + yn * yn)).sum() / 12.0
    return float(polar / polygon_area(verts))


def is_convex_ccw(verts: np.ndarray) -> bool:
    d1 = np.roll(verts, -1, axis=0) - verts
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross > 0))


def edge_normals(verts: np.ndarray) -> np.ndarray:
    """Outward unit normals of a CCW polygon, one per edge ``v[k] -> v[k+1]``."""
    e = np.roll(verts, -1, axis=0) - verts
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def bounding_radius(verts: np.ndarray) -> float:
    return float(np.sqrt((verts ** 2).sum(axis=1)).max())


def _support_center(verts: np.ndarray, proj: np.ndarray, extreme: float, tol: float = 1e-7) -> np.ndarray:
    sel = np.abs(proj - extreme) <= tol
    return verts[sel].mean(axis=0)


def sat_penetration(a: np.ndarray, b: np.ndarray):
    """Minimum-overlap separating-axis test between two convex polygons.

    Returns ``(depth, normal, contact)`` with ``normal`` pointing from ``a``
    to ``b``; moving ``b`` by ``depth * normal`` separates the pair.  Returns
    None when the polygons do not overlap.
    """
    axes = np.concatenate([edge_normals(a), edge_normals(b)])
    pa = a @ axes.T
    pb = b @ axes.T
    amin, amax = pa.min(axis=0), pa.max(axis=0)
    bmin, bmax = pb.min(axis=0), pb.max(axis=0)
    overlap = np.minimum(amax, bmax) - np.maximum(amin, bmin)
    if np.any(overlap <= 0.0):
        return None
    # orient each axis from a toward b
    forward = (amax - bmin) <= (bmax - amin)
    depth = np.where(forward, amax - bmin, bmax - amin)
    k = int(np.argmin(depth))
    d = float(depth[k])
    n = axes[k] if forward[k] else -axes[k]
    ca = _support_center(a, a @ n, float((a @ n).max()))
    cb = _support_center(b, b @ n, float((b @ n).min()))
    return d, n, 0.5 * (ca + cb)


def polygons_overlap(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> bool:
    axes = np.concatenate([edge_normals(a), edge_normals(b)])
    pa = a @ axes.T
    pb = b @ axes.T
    overlap = np.minimum(pa.max(axis=0), pb.max(axis=0)) - np.maximum(pa.min(axis=0), pb.min(axis=0))
    return bool(np.all(overlap > eps))


def closest_point_on_boundary(verts: np.ndarray, p: np.ndarray):
    """Closest boundary point of a polygon to ``p`` and its distance."""
    a = verts
    e = np.roll(verts, -1, axis=0) - verts
    t = np.clip(((p - a) * e).sum(axis=1) / (e * e).sum(axis=1), 0.0, 1.0)
    q = a + t[:, None] * e
    d = np.sqrt(((q - p) ** 2).sum(axis=1))
    k = int(np.argmin(d))
    return q[k], float(d[k])


def circle_penetration(verts: np.ndarray, center: np.ndarray, radius: float):
    """Penetration of a disc into a polygon.

    Returns ``(depth, normal, contact)`` where translating the polygon by
    ``depth * normal`` separates it from the disc, or None when clear.
    """
    normals = edge_normals(verts)
    signed = ((center - verts) * normals).sum(axis=1)
    if np.all(signed <= 0.0):
        k = int(np.argmax(signed))
        depth = radius - float(signed[k])
        n = -normals[k]
        return depth, n, center - float(signed[k]) * normals[k]
    q, d = closest_point_on_boundary(verts, center)
    if d >= radius:
        return None
    n = (q - center) / d
    return radius - d, n, q


def polygon_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between convex polygons (0 when overlapping)."""
    if polygons_overlap(a, b, eps=0.0):
        return 0.0
    best = math.inf
    for p in a:
        best = min(best, closest_point_on_boundary(b, p)[1])
    for p in b:
        best = min(best, closest_point_on_boundary(a, p)[1])
    return best


def line_chord(verts: np.ndarray, p: np.ndarray, u: np.ndarray, t_min: float, t_max: float) -> float:
    """Length of ``{p + t u : t in [t_min, t_max]}`` inside a convex polygon."""
    normals = edge_normals(verts)
    lo, hi = t_min, t_max
    for v, n in zip(verts, normals):
        # inside: (p + t u - v) . n <= 0
        num = float(np.dot(p - v, n))
        den = float(np.dot(u, n))
        if abs(den) < 1e-15:
            if num > 0:
                return 0.0
            continue
        t = -num / den
        if den > 0:
            hi = min(hi, t)
        else:
            lo = max(lo, t)
        if lo >= hi:
            return 0.0
    return hi - lo


def rect_polygon(cx: float, cy: float, ux: float, uy: float, half_along: float, half_across: float) -> np.ndarray:
    """CCW rectangle with long axis ``(ux, uy)``."""
    ax = np.array([ux, uy]) * half_along
    bx = np.array([-uy, ux]) * half_across
    c = np.array([cx, cy])
    return np.stack([c - ax - bx, c + ax - bx, c + ax + bx, c - ax + bx])


def points_in_polygon(verts: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside (or on) a convex CCW polygon."""
    inside = np.ones(X.shape, dtype=bool)
    nxt = np.roll(verts, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(verts, nxt):
        inside &= (x1 - x0) * (Y - y0) - (y1 - y0) * (X - x0) >= 0.0
    return inside
