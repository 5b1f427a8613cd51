"""Planar primitives shared by the world and the scorer: polylines and oriented boxes."""

from __future__ import annotations

import numpy as np


class Polyline:
    """Densely sampled path with arc length; supports batched projection."""

    def __init__(self, points, s0: float = 0.0):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("polyline needs at least two points")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)]) - s0
        self.length = float(self.s[-1] - self.s[0])

    def __eq__(self, other):
        return isinstance(other, Polyline) and np.array_equal(self.points, other.points) \
            and np.array_equal(self.s, other.s)

    def project(self, xy):
        """Arc length, signed lateral offset (left positive), tangent heading, distance."""
        p = np.asarray(xy, dtype=np.float64)
        shape = p.shape[:-1]
        p = p.reshape(-1, 2)
        a = self.points[:-1]
        rel = p[:, None, :] - a[None, :, :]
        t = np.einsum("nmk,mk->nm", rel, self.seg_dir)
        t = np.clip(t, 0.0, self.seg_len[None, :])
        foot = a[None] + t[..., None] * self.seg_dir[None]
        d2 = ((p[:, None, :] - foot) ** 2).sum(-1)
        j = np.argmin(d2, axis=1)
        idx = np.arange(p.shape[0])
        tj = t[idx, j]
        dirj = self.seg_dir[j]
        r = p - a[j]
        lat = dirj[:, 0] * r[:, 1] - dirj[:, 1] * r[:, 0]
        s = self.s[j] + tj
        heading = np.arctan2(dirj[:, 1], dirj[:, 0])
        dist = np.sqrt(d2[idx, j])
        return (s.reshape(shape), lat.reshape(shape), heading.reshape(shape), dist.reshape(shape))

    def point_at(self, s):
        s = np.asarray(s, dtype=np.float64)
        j = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg_len) - 1)
        t = s - self.s[j]
        xy = self.points[j] + t[..., None] * self.seg_dir[j]
        heading = np.arctan2(self.seg_dir[j, 1], self.seg_dir[j, 0])
        return xy, heading


def box_corners(x, y, theta, length, width) -> np.ndarray:
    """Corners (..., 4, 2) of oriented rectangles, counter-clockwise."""
    x, y, theta, length, width = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64)
                                                       for v in (x, y, theta, length, width)))
    c, s = np.cos(theta), np.sin(theta)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
    lx = local[:, 0] * hl[..., None]
    ly = local[:, 1] * hw[..., None]
    cx = x[..., None] + c[..., None] * lx - s[..., None] * ly
    cy = y[..., None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([cx, cy], axis=-1)


def boxes_intersect(a, b) -> np.ndarray:
    """Vectorised separating-axis test for oriented boxes.

    ``a`` and ``b`` are (..., 5) arrays of (x, y, theta, length, width) that
    broadcast against each other. Touching boxes count as intersecting.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    ra = 0.5 * np.hypot(a[..., 3], a[..., 4])
    rb = 0.5 * np.hypot(b[..., 3], b[..., 4])
    near = np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1]) <= ra + rb
    out = np.zeros(a.shape[:-1], dtype=bool)
    if not near.any():
        return out
    A, B = a[near], b[near]
    ca = box_corners(A[:, 0], A[:, 1], A[:, 2], A[:, 3], A[:, 4])
    cb = box_corners(B[:, 0], B[:, 1], B[:, 2], B[:, 3], B[:, 4])
    axes = np.stack([np.cos(A[:, 2]), np.sin(A[:, 2]), -np.sin(A[:, 2]), np.cos(A[:, 2]),
                     np.cos(B[:, 2]), np.sin(B[:, 2]), -np.sin(B[:, 2]), np.cos(B[:, 2])],
                    axis=-1).reshape(-1, 4, 2)
    pa = np.einsum("nck,nak->nac", ca, axes)
    pb = np.einsum("nck,nak->nac", cb, axes)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    out[near] = ~separated.any(-1)
    return out


def polygons_intersect_sat(p, q) -> bool:
    """Scalar separating-axis test for two convex polygons given as corner lists."""
    for poly in (p, q):
        n = len(poly)
        for i in range(n):
            x1, y1 = poly[i]
            x2, y2 = poly[(i + 1) % n]
            ax, ay = y1 - y2, x2 - x1
            pmin = min(ax * x + ay * y for x, y in p)
            pmax = max(ax * x + ay * y for x, y in p)
            qmin = min(ax * x + ay * y for x, y in q)
            qmax = max(ax * x + ay * y for x, y in q)
            if pmax < qmin or qmax < pmin:
                return False
    return True
