"""Mesh inside/outside and nearest-surface queries.

Inside tests use the generalized winding number (sum of signed solid angles).
Nearest-surface queries visit triangles through a bounding-sphere hierarchy
(triangles sorted along a Morton curve, grouped into fixed-size leaves) with
best-first pruning, so typical queries touch a small fraction of the mesh.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

_LEAF = 16


class MeshDefectError(ValueError):
    pass


def check_closed(vertices: np.ndarray, triangles: np.ndarray) -> None:
    """Raise unless the mesh is closed, manifold and consistently oriented."""
    tris = np.asarray(triangles, dtype=np.int64)
    if tris.ndim != 2 or tris.shape[1] != 3 or len(tris) == 0:
        raise MeshDefectError("mesh has no triangles")
    v = np.asarray(vertices, dtype=np.float64)
    a, b, c = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    scale = max(np.ptp(v, axis=0).max(), 1e-300)
    bad = np.flatnonzero(area2 <= 1e-14 * scale * scale)
    if len(bad):
        raise MeshDefectError(f"degenerate (zero-area) triangle {int(bad[0])}")
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    V = len(v)
    key = directed[:, 0] * V + directed[:, 1]
    uniq, counts = np.unique(key, return_counts=True)
    if np.any(counts > 1):
        e = uniq[counts > 1][0]
        raise MeshDefectError(f"inconsistent orientation or non-manifold edge ({e // V}, {e % V})")
    rev = directed[:, 1] * V + directed[:, 0]
    missing = ~np.isin(rev, uniq)
    if np.any(missing):
        e = directed[np.flatnonzero(missing)[0]]
        raise MeshDefectError(f"open boundary edge ({e[0]}, {e[1]})")


@numba.njit(cache=True, fastmath=False)
def _winding(points, verts, tris):
    out = np.zeros(points.shape[0])
    for p in range(points.shape[0]):
        px, py, pz = points[p, 0], points[p, 1], points[p, 2]
        total = 0.0
        for t in range(tris.shape[0]):
            i, j, k = tris[t, 0], tris[t, 1], tris[t, 2]
            ax = verts[i, 0] - px
            ay = verts[i, 1] - py
            az = verts[i, 2] - pz
            bx = verts[j, 0] - px
            by = verts[j, 1] - py
            bz = verts[j, 2] - pz
            cx = verts[k, 0] - px
            cy = verts[k, 1] - py
            cz = verts[k, 2] - pz
            la = np.sqrt(ax * ax + ay * ay + az * az)
            lb = np.sqrt(bx * bx + by * by + bz * bz)
            lc = np.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
                   + (ax * cx + ay * cy + az * cz) * lb + (bx * cx + by * cy + bz * cz) * la)
            total += 2.0 * np.arctan2(det, den)
        out[p] = total / (4.0 * np.pi)
    return out


def winding_numbers(points, vertices, triangles) -> np.ndarray:
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _winding(pts, np.ascontiguousarray(vertices, dtype=np.float64),
                    np.ascontiguousarray(triangles, dtype=np.int64))


@numba.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + (d1 / (d1 - d3)) * ab
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + (d2 / (d2 - d6)) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@numba.njit(cache=True)
def _nearest_bvh(points, verts, tris, leaf_center, leaf_radius, leaf_start, leaf_end,
                 node_center, node_radius, group):
    n = points.shape[0]
    best_d = np.empty(n)
    best_pt = np.empty((n, 3))
    best_tri = np.empty(n, dtype=np.int64)
    n_nodes = node_center.shape[0]
    node_lb = np.empty(n_nodes)
    leaf_lb = np.empty(leaf_center.shape[0])
    for q in range(n):
        p = points[q]
        # upper bound from the nearest node's first leaf
        for k in range(n_nodes):
            dx = p - node_center[k]
            node_lb[k] = max(np.sqrt(dx @ dx) - node_radius[k], 0.0)
        order = np.argsort(node_lb)
        bd = np.inf
        bp = np.zeros(3)
        bt = -1
        for oi in range(n_nodes):
            k = order[oi]
            if node_lb[k] >= bd:
                break
            l0 = k * group
            l1 = min(l0 + group, leaf_center.shape[0])
            for l in range(l0, l1):
                dx = p - leaf_center[l]
                leaf_lb[l] = max(np.sqrt(dx @ dx) - leaf_radius[l], 0.0)
            lorder = np.argsort(leaf_lb[l0:l1]) + l0
            for li in range(l1 - l0):
                l = lorder[li]
                if leaf_lb[l] >= bd:
                    break
                for t in range(leaf_start[l], leaf_end[l]):
                    cp = _closest_on_triangle(p, verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]])
                    dv = p - cp
                    d = np.sqrt(dv @ dv)
                    if d < bd:
                        bd = d
                        bp = cp
                        bt = t
        best_d[q] = bd
        best_pt[q] = bp
        best_tri[q] = bt
    return best_d, best_pt, best_tri


def _morton_order(c: np.ndarray) -> np.ndarray:
    lo = c.min(0)
    span = np.maximum(c.max(0) - lo, 1e-300)
    q = np.minimum(((c - lo) / span * 1023).astype(np.int64), 1023)
    code = np.zeros(len(c), dtype=np.int64)
    for bit in range(10):
        for axis in range(3):
            code |= ((q[:, axis] >> bit) & 1) << (3 * bit + axis)
    return np.argsort(code, kind="stable")


@dataclass
class SurfaceIndex:
    """Immutable two-level bounding-sphere hierarchy over a triangle mesh."""

    vertices: np.ndarray
    triangles: np.ndarray  # reordered along the Morton curve
    tri_ids: np.ndarray  # position in the reordered list -> original triangle index
    leaf_center: np.ndarray
    leaf_radius: np.ndarray
    leaf_start: np.ndarray
    leaf_end: np.ndarray
    node_center: np.ndarray
    node_radius: np.ndarray
    group: int

    @classmethod
    def build(cls, vertices, triangles) -> "SurfaceIndex":
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        t = np.asarray(triangles, dtype=np.int64)
        cent = v[t].mean(1)
        order = _morton_order(cent)
        t = np.ascontiguousarray(t[order])
        tv = v[t]  # (T, 3, 3)
        starts = np.arange(0, len(t), _LEAF)
        ends = np.minimum(starts + _LEAF, len(t))
        lc = np.empty((len(starts), 3))
        lr = np.empty(len(starts))
        for i, (s, e) in enumerate(zip(starts, ends)):
            pts = tv[s:e].reshape(-1, 3)
            lc[i] = 0.5 * (pts.min(0) + pts.max(0))
            lr[i] = np.sqrt(((pts - lc[i]) ** 2).sum(1).max())
        group = max(1, int(np.ceil(np.sqrt(len(starts)))))
        nc, nr = [], []
        for g0 in range(0, len(starts), group):
            cs, rs = lc[g0:g0 + group], lr[g0:g0 + group]
            lo = (cs - rs[:, None]).min(0)
            hi = (cs + rs[:, None]).max(0)
            c = 0.5 * (lo + hi)
            nc.append(c)
            nr.append((np.sqrt(((cs - c) ** 2).sum(1)) + rs).max())
        return cls(v, t, order, lc, lr, starts, ends, np.array(nc), np.array(nr), group)

    def nearest(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distance, closest surface point and (original) triangle index per query point."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        d, cp, tri = _nearest_bvh(pts, self.vertices, self.triangles, self.leaf_center,
                                  self.leaf_radius, self.leaf_start, self.leaf_end,
                                  self.node_center, self.node_radius, self.group)
        return d, cp, self.tri_ids[tri]


@numba.njit(cache=True)
def _nearest_brute(points, verts, tris):
    n = points.shape[0]
    best = np.full(n, np.inf)
    for q in range(n):
        p = points[q]
        for t in range(tris.shape[0]):
            cp = _closest_on_triangle(p, verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]])
            dv = p - cp
            d = np.sqrt(dv @ dv)
            if d < best[q]:
                best[q] = d
    return best


def surface_distance_bruteforce(points, vertices, triangles) -> np.ndarray:
    """Exhaustive point-to-mesh distance (oracle for the hierarchy)."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _nearest_brute(pts, np.ascontiguousarray(vertices, dtype=np.float64),
                          np.ascontiguousarray(triangles, dtype=np.int64))


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles)
    fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, t[:, k], fn)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
