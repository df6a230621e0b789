"""Triangle scenes with a bounding-volume hierarchy for nearest-hit ray queries."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba as nb
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the TBB probe warns on older system TBB builds; workqueue is always present
    nb.config.THREADING_LAYER = "workqueue"

from .validation import RoverBenchError

TERRAIN_TAG = -1
RAY_T_MIN = 1e-6
DEGENERATE_AREA = 1e-12
LEAF_SIZE = 4

_STACK_DEPTH = 128


@nb.njit(cache=True)
def _build_bvh(lo, hi, centroids, leaf_size):
    n = centroids.shape[0]
    order = np.arange(n)
    max_nodes = 2 * n + 1
    node_lo = np.empty((max_nodes, 3))
    node_hi = np.empty((max_nodes, 3))
    # left child, right child, first primitive, primitive count (leaf iff count > 0)
    node_meta = np.full((max_nodes, 4), -1, dtype=np.int64)

    stack_node = np.empty(_STACK_DEPTH * 2, dtype=np.int64)
    stack_start = np.empty(_STACK_DEPTH * 2, dtype=np.int64)
    stack_end = np.empty(_STACK_DEPTH * 2, dtype=np.int64)
    n_nodes = 1
    sp = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        start = stack_start[sp]
        end = stack_end[sp]
        for a in range(3):
            node_lo[node, a] = np.inf
            node_hi[node, a] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for k in range(start, end):
            p = order[k]
            for a in range(3):
                if lo[p, a] < node_lo[node, a]:
                    node_lo[node, a] = lo[p, a]
                if hi[p, a] > node_hi[node, a]:
                    node_hi[node, a] = hi[p, a]
                c = centroids[p, a]
                if c < clo[a]:
                    clo[a] = c
                if c > chi[a]:
                    chi[a] = c
        count = end - start
        extent = chi - clo
        axis = 0
        if extent[1] > extent[axis]:
            axis = 1
        if extent[2] > extent[axis]:
            axis = 2
        if count <= leaf_size or extent[axis] <= 0.0:
            node_meta[node, 2] = start
            node_meta[node, 3] = count
            continue
        keys = np.empty(count)
        for k in range(count):
            keys[k] = centroids[order[start + k], axis]
        perm = np.argsort(keys, kind="mergesort")
        segment = order[start:end].copy()
        for k in range(count):
            order[start + k] = segment[perm[k]]
        mid = start + count // 2
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_meta[node, 0] = left
        node_meta[node, 1] = right
        node_meta[node, 3] = 0
        stack_node[sp] = right
        stack_start[sp] = mid
        stack_end[sp] = end
        sp += 1
        stack_node[sp] = left
        stack_start[sp] = start
        stack_end[sp] = mid
        sp += 1
    return order, node_lo[:n_nodes].copy(), node_hi[:n_nodes].copy(), node_meta[:n_nodes].copy()


@nb.njit(cache=True, inline="always")
def _intersect_triangle(ox, oy, oz, dx, dy, dz, tri):
    """Möller–Trumbore; returns the ray parameter or inf."""
    e1x = tri[1, 0] - tri[0, 0]
    e1y = tri[1, 1] - tri[0, 1]
    e1z = tri[1, 2] - tri[0, 2]
    e2x = tri[2, 0] - tri[0, 0]
    e2y = tri[2, 1] - tri[0, 1]
    e2z = tri[2, 2] - tri[0, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return np.inf
    inv = 1.0 / det
    sx = ox - tri[0, 0]
    sy = oy - tri[0, 1]
    sz = oz - tri[0, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t > RAY_T_MIN:
        return t
    return np.inf


@nb.njit(cache=True, inline="always")
def _slab(ox, oy, oz, ix, iy, iz, lo, hi, tmax):
    t0 = 0.0
    t1 = tmax
    a = (lo[0] - ox) * ix
    b = (hi[0] - ox) * ix
    if a > b:
        a, b = b, a
    if a > t0:
        t0 = a
    if b < t1:
        t1 = b
    a = (lo[1] - oy) * iy
    b = (hi[1] - oy) * iy
    if a > b:
        a, b = b, a
    if a > t0:
        t0 = a
    if b < t1:
        t1 = b
    a = (lo[2] - oz) * iz
    b = (hi[2] - oz) * iz
    if a > b:
        a, b = b, a
    if a > t0:
        t0 = a
    if b < t1:
        t1 = b
    # NaN from 0*inf on an axis-parallel ray through a slab boundary fails both
    # comparisons above and leaves the interval untouched, which is conservative.
    if t0 <= t1:
        return t0
    return np.inf


@nb.njit(cache=True)
def _cast_one(ox, oy, oz, dx, dy, dz, tris, order, node_lo, node_hi, node_meta):
    ix = 1.0 / dx if dx != 0.0 else np.inf
    iy = 1.0 / dy if dy != 0.0 else np.inf
    iz = 1.0 / dz if dz != 0.0 else np.inf
    best_t = np.inf
    best_id = -1
    stack = np.empty(_STACK_DEPTH, dtype=np.int64)
    sp = 0
    if _slab(ox, oy, oz, ix, iy, iz, node_lo[0], node_hi[0], np.inf) < np.inf:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        count = node_meta[node, 3]
        if count > 0:
            start = node_meta[node, 2]
            for k in range(start, start + count):
                tid = order[k]
                t = _intersect_triangle(ox, oy, oz, dx, dy, dz, tris[tid])
                if t < best_t or (t == best_t and t < np.inf and tid < best_id):
                    best_t = t
                    best_id = tid
            continue
        left = node_meta[node, 0]
        right = node_meta[node, 1]
        tl = _slab(ox, oy, oz, ix, iy, iz, node_lo[left], node_hi[left], best_t)
        tr = _slab(ox, oy, oz, ix, iy, iz, node_lo[right], node_hi[right], best_t)
        # push the farther child first so the nearer one is visited next
        if tl <= tr:
            if tr < np.inf:
                stack[sp] = right
                sp += 1
            if tl < np.inf:
                stack[sp] = left
                sp += 1
        else:
            if tl < np.inf:
                stack[sp] = left
                sp += 1
            if tr < np.inf:
                stack[sp] = right
                sp += 1
    return best_t, best_id


@nb.njit(cache=True, parallel=True)
def _cast_many(origins, dirs, tris, order, node_lo, node_hi, node_meta):
    n = dirs.shape[0]
    dist = np.empty(n)
    ids = np.empty(n, dtype=np.int64)
    stride = 0 if origins.shape[0] == 1 else 1
    for i in nb.prange(n):
        o = i * stride
        t, tid = _cast_one(
            origins[o, 0], origins[o, 1], origins[o, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2],
            tris, order, node_lo, node_hi, node_meta,
        )
        dist[i] = t
        ids[i] = tid
    return dist, ids


@dataclass(frozen=True)
class BVH:
    order: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_meta: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_meta)

    @classmethod
    def build(cls, triangles: np.ndarray, leaf_size: int = LEAF_SIZE) -> "BVH":
        lo = triangles.min(axis=1)
        hi = triangles.max(axis=1)
        centroids = triangles.mean(axis=1)
        order, node_lo, node_hi, meta = _build_bvh(lo, hi, centroids, leaf_size)
        for arr in (order, node_lo, node_hi, meta):
            arr.setflags(write=False)
        return cls(order, node_lo, node_hi, meta)


def triangle_areas(triangles) -> np.ndarray:
    triangles = np.asarray(triangles, dtype=float)
    cross = np.cross(triangles[:, 1] - triangles[:, 0], triangles[:, 2] - triangles[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


class Scene:
    """Immutable triangle soup with per-triangle tags and a BVH.

    Tags are ``TERRAIN_TAG`` for terrain triangles and the rock index
    (``>= 0``) for rock triangles.
    """

    def __init__(self, triangles, tags=None, *, allow_empty: bool = False):
        tris = np.ascontiguousarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        if tags is None:
            tags = np.full(len(tris), TERRAIN_TAG, dtype=np.int64)
        tags = np.asarray(tags, dtype=np.int64).reshape(-1)
        if len(tags) != len(tris):
            raise ValueError("one tag per triangle is required")
        if not np.all(np.isfinite(tris)):
            raise ValueError("triangle coordinates must be finite")
        keep = triangle_areas(tris) > DEGENERATE_AREA
        tris, tags = np.ascontiguousarray(tris[keep]), tags[keep]
        if len(tris) == 0 and not allow_empty:
            raise RoverBenchError("scene has no non-degenerate triangles")
        tris.setflags(write=False)
        tags.setflags(write=False)
        self.triangles = tris
        self.tags = tags
        if len(tris):
            self.bvh = BVH.build(tris)
            self.bounds = np.stack([tris.reshape(-1, 3).min(axis=0), tris.reshape(-1, 3).max(axis=0)])
        else:
            self.bvh = None
            self.bounds = np.array([[np.inf] * 3, [-np.inf] * 3])
        self.bounds.setflags(write=False)

    @classmethod
    def empty(cls) -> "Scene":
        """A scene every ray misses."""
        return cls(np.empty((0, 3, 3)), allow_empty=True)

    def __len__(self) -> int:
        return len(self.triangles)

    def __repr__(self) -> str:
        n_rocks = len(np.unique(self.tags[self.tags >= 0]))
        return f"Scene(triangles={len(self)}, rocks={n_rocks})"

    def cast(self, origins, directions):
        """Nearest hits for a batch of rays.

        ``origins`` is ``(n, 3)`` or a single ``(3,)`` origin shared by all
        rays. Returns ``(distance, triangle_id)`` arrays with ``inf`` / ``-1``
        for misses. Directions are assumed to be unit length.
        """
        dirs = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        if len(origins) not in (1, len(dirs)):
            raise ValueError("origins must be a single point or one per ray")
        if len(dirs) == 0 or self.bvh is None:
            return np.full(len(dirs), np.inf), np.full(len(dirs), -1, dtype=np.int64)
        b = self.bvh
        return _cast_many(origins, dirs, self.triangles, b.order, b.node_lo, b.node_hi, b.node_meta)


def brute_force_cast(triangles, origin, direction):
    """Nearest hit over every triangle (vectorised numpy); reference for the BVH."""
    tris = np.asarray(triangles, dtype=float)
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) >= 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > RAY_T_MIN)
    if not hit.any():
        return np.inf, -1
    t = np.where(hit, t, np.inf)
    best = int(np.argmin(t))
    return float(t[best]), best
