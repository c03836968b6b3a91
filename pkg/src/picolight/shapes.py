"""Shape primitives, batched ray intersection, and a median-split BVH.

Primitives are stored as structure-of-arrays per kind (triangle, rectangle,
sphere).  Intersection is vectorized over both rays and primitives; small
scenes test every primitive, larger ones go through BVH packet traversal.
Ties at exactly equal distance resolve to the lowest shape id so results
are independent of insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Ray, SurfaceInteraction, cross, normalize

_BRUTE_FORCE_LIMIT = 64
_BIG = np.iinfo(np.int64).max

KIND_TRIANGLE = 0
KIND_RECTANGLE = 1
KIND_SPHERE = 2


def _dots(a, b):
    """(P,3) x (N,3) -> (P,N) dot products without BLAS (deterministic)."""
    return np.einsum("pk,nk->pn", a, b, optimize=False)


@dataclass
class PrimBlock:
    """Per-kind primitive storage plus shared per-primitive attributes."""

    kind: int
    shape_id: np.ndarray  # (P,)
    material: np.ndarray  # (P,) index into material table, -1 = none
    emitter: np.ndarray  # (P,) index into emitter table, -1 = none
    medium: np.ndarray  # (P,) interior medium index, -1 = vacuum
    data: dict = field(default_factory=dict)

    @property
    def count(self):
        return self.shape_id.shape[0]

    def subset(self, idx):
        return PrimBlock(
            self.kind,
            self.shape_id[idx],
            self.material[idx],
            self.emitter[idx],
            self.medium[idx],
            {k: v[idx] for k, v in self.data.items()},
        )


def make_triangle_block(v0, v1, v2, shape_id, material, emitter, medium):
    v0 = np.atleast_2d(np.asarray(v0, dtype=np.float64))
    e1 = np.atleast_2d(np.asarray(v1, dtype=np.float64)) - v0
    e2 = np.atleast_2d(np.asarray(v2, dtype=np.float64)) - v0
    n = normalize(cross(e1, e2))
    return PrimBlock(
        KIND_TRIANGLE,
        np.asarray(shape_id, dtype=np.int64),
        np.asarray(material, dtype=np.int64),
        np.asarray(emitter, dtype=np.int64),
        np.asarray(medium, dtype=np.int64),
        {"v0": v0, "e1": e1, "e2": e2, "n": n},
    )


def make_rectangle_block(center, edge_u, edge_v, shape_id, material, emitter, medium):
    center = np.atleast_2d(np.asarray(center, dtype=np.float64))
    edge_u = np.atleast_2d(np.asarray(edge_u, dtype=np.float64))
    edge_v = np.atleast_2d(np.asarray(edge_v, dtype=np.float64))
    n = normalize(cross(edge_u, edge_v))
    return PrimBlock(
        KIND_RECTANGLE,
        np.asarray(shape_id, dtype=np.int64),
        np.asarray(material, dtype=np.int64),
        np.asarray(emitter, dtype=np.int64),
        np.asarray(medium, dtype=np.int64),
        {
            "center": center,
            "eu": edge_u,
            "ev": edge_v,
            "n": n,
            "ndc": np.sum(n * center, axis=-1),
            "ieu2": 1.0 / np.sum(edge_u * edge_u, axis=-1),
            "iev2": 1.0 / np.sum(edge_v * edge_v, axis=-1),
            "ceu": np.sum(center * edge_u, axis=-1),
            "cev": np.sum(center * edge_v, axis=-1),
        },
    )


def make_sphere_block(center, radius, shape_id, material, emitter, medium):
    center = np.atleast_2d(np.asarray(center, dtype=np.float64))
    radius = np.atleast_1d(np.asarray(radius, dtype=np.float64))
    return PrimBlock(
        KIND_SPHERE,
        np.asarray(shape_id, dtype=np.int64),
        np.asarray(material, dtype=np.int64),
        np.asarray(emitter, dtype=np.int64),
        np.asarray(medium, dtype=np.int64),
        {"center": center, "radius": radius, "c2": np.sum(center * center, axis=-1)},
    )


def _hits_triangles(block, o, d):
    """Moller-Trumbore, (P, N) distances with inf on miss."""
    v0 = block.data["v0"][:, None, :]
    e1 = block.data["e1"][:, None, :]
    e2 = block.data["e2"][:, None, :]
    pvec = np.cross(d[None, :, :], e2)
    det = np.sum(e1 * pvec, axis=-1)
    ok = np.abs(det) > 1e-12
    inv_det = np.where(ok, 1.0, 0.0) / np.where(ok, det, 1.0)
    tvec = o[None, :, :] - v0
    u = np.sum(tvec * pvec, axis=-1) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.sum(d[None, :, :] * qvec, axis=-1) * inv_det
    t = np.sum(e2 * qvec, axis=-1) * inv_det
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return np.where(hit, t, np.inf)


def _hits_rectangles(block, o, d):
    """Plane hit constrained to |a|,|b| <= 1 in edge coordinates. (P, N)."""
    n = block.data["n"]
    nd = _dots(n, d)
    ok = np.abs(nd) > 1e-12
    no = _dots(n, o)
    t = (block.data["ndc"][:, None] - no) / np.where(ok, nd, 1.0)
    valid = ok & np.isfinite(t)
    t_safe = np.where(valid, t, 0.0)
    a = (
        _dots(block.data["eu"], o) + t_safe * _dots(block.data["eu"], d) - block.data["ceu"][:, None]
    ) * block.data["ieu2"][:, None]
    hit = valid & (np.abs(a) <= 1.0)
    b = (
        _dots(block.data["ev"], o) + t_safe * _dots(block.data["ev"], d) - block.data["cev"][:, None]
    ) * block.data["iev2"][:, None]
    hit &= np.abs(b) <= 1.0
    return np.where(hit, t_safe, np.inf)


def _hits_spheres(block, o, d):
    """Both quadratic roots, (P, N) each, inf where no real root."""
    c = block.data["center"]
    r = block.data["radius"]
    b = _dots(c, d) - np.sum(o * d, axis=-1)[None, :]  # -(oc . d)
    cc = (
        np.sum(o * o, axis=-1)[None, :]
        - 2.0 * _dots(c, o)
        + block.data["c2"][:, None]
        - (r * r)[:, None]
    )
    disc = b * b - cc
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = np.where(ok, b - sq, np.inf)
    t1 = np.where(ok, b + sq, np.inf)
    return t0, t1


def _block_candidates(block, o, d):
    """List of (distances (P,N), local prim index array) candidate sets."""
    if block.kind == KIND_TRIANGLE:
        return [_hits_triangles(block, o, d)]
    if block.kind == KIND_RECTANGLE:
        return [_hits_rectangles(block, o, d)]
    t0, t1 = _hits_spheres(block, o, d)
    return [t0, t1]


def _reduce_nearest(t, sid, gid, t_min, t_max):
    """Lexicographic (distance, shape_id) argmin over the primitive axis.

    t: (P, N); sid, gid: (P,).  Returns (best_t (N,), best_gid (N,))."""
    t = np.where((t > t_min[None, :]) & (t < t_max[None, :]), t, np.inf)
    best_t = t.min(axis=0)
    at_min = (t == best_t[None, :]) & np.isfinite(t)
    sid_m = np.where(at_min, sid[:, None], _BIG)
    best_sid = sid_m.min(axis=0)
    gid_m = np.where(at_min & (sid_m == best_sid[None, :]), gid[:, None], _BIG)
    best_gid = gid_m.min(axis=0)
    return best_t, np.where(np.isfinite(best_t), best_gid, -1)


class Bvh:
    """Axis-aligned BVH, median split on the centroid of the widest axis."""

    LEAF_SIZE = 8

    def __init__(self, aabb_min, aabb_max):
        n = aabb_min.shape[0]
        self.order = np.arange(n)
        cent = 0.5 * (aabb_min + aabb_max)
        nodes = []  # [bb_min, bb_max, left, right, start, count]

        def build(lo, hi):
            idx = self.order[lo:hi]
            bb_min = aabb_min[idx].min(axis=0)
            bb_max = aabb_max[idx].max(axis=0)
            node_id = len(nodes)
            nodes.append([bb_min, bb_max, -1, -1, lo, hi - lo])
            if hi - lo <= self.LEAF_SIZE:
                return node_id
            axis = int(np.argmax(bb_max - bb_min))
            keys = cent[idx, axis]
            split = np.argsort(keys, kind="stable")
            self.order[lo:hi] = idx[split]
            mid = lo + (hi - lo) // 2
            nodes[node_id][4] = -1
            nodes[node_id][5] = 0
            nodes[node_id][2] = build(lo, mid)
            nodes[node_id][3] = build(mid, hi)
            return node_id

        if n > 0:
            build(0, n)
        self.bb_min = np.array([nd[0] for nd in nodes]) if nodes else np.zeros((0, 3))
        self.bb_max = np.array([nd[1] for nd in nodes]) if nodes else np.zeros((0, 3))
        self.left = np.array([nd[2] for nd in nodes], dtype=np.int64)
        self.right = np.array([nd[3] for nd in nodes], dtype=np.int64)
        self.start = np.array([nd[4] for nd in nodes], dtype=np.int64)
        self.count = np.array([nd[5] for nd in nodes], dtype=np.int64)

    def hits_node(self, node, o, inv_d, t_min, t_max):
        lo = (self.bb_min[node][None, :] - o) * inv_d
        hi = (self.bb_max[node][None, :] - o) * inv_d
        near = np.minimum(lo, hi).max(axis=-1)
        far = np.maximum(lo, hi).min(axis=-1)
        return (near <= far) & (far >= t_min) & (near <= t_max)


class Geometry:
    """All scene primitives plus the acceleration structure.

    Read-only after construction; shared freely across render workers.
    """

    def __init__(self, blocks: list[PrimBlock]):
        self.blocks = [b for b in blocks if b.count > 0]
        mins, maxs, kinds, locals_ = [], [], [], []
        for bi, b in enumerate(self.blocks):
            if b.kind == KIND_TRIANGLE:
                v0 = b.data["v0"]
                v1 = v0 + b.data["e1"]
                v2 = v0 + b.data["e2"]
                mins.append(np.minimum(np.minimum(v0, v1), v2))
                maxs.append(np.maximum(np.maximum(v0, v1), v2))
            elif b.kind == KIND_RECTANGLE:
                c, eu, ev = b.data["center"], b.data["eu"], b.data["ev"]
                ext = np.abs(eu) + np.abs(ev)
                mins.append(c - ext)
                maxs.append(c + ext)
            else:
                c, r = b.data["center"], b.data["radius"][:, None]
                mins.append(c - r)
                maxs.append(c + r)
            kinds.append(np.full(b.count, bi, dtype=np.int64))
            locals_.append(np.arange(b.count, dtype=np.int64))
        if mins:
            pad = 1e-9
            self.aabb_min = np.concatenate(mins) - pad
            self.aabb_max = np.concatenate(maxs) + pad
            self.prim_block = np.concatenate(kinds)
            self.prim_local = np.concatenate(locals_)
        else:
            self.aabb_min = np.zeros((0, 3))
            self.aabb_max = np.zeros((0, 3))
            self.prim_block = np.zeros(0, dtype=np.int64)
            self.prim_local = np.zeros(0, dtype=np.int64)
        self.n_prims = self.prim_block.shape[0]
        # global primitive ids ordered block-major
        offsets = np.cumsum([0] + [b.count for b in self.blocks])
        self._block_offset = offsets
        self.bvh = (
            Bvh(self.aabb_min, self.aabb_max) if self.n_prims > _BRUTE_FORCE_LIMIT else None
        )

    def _scan_blocks(self, o, d, t_min, t_max, subset=None):
        """Nearest (t, global prim) over all primitives (or a subset list)."""
        n = o.shape[0]
        best_t = np.full(n, np.inf)
        best_sid = np.full(n, _BIG, dtype=np.int64)
        best_gid = np.full(n, -1, dtype=np.int64)
        for bi, block in enumerate(self.blocks):
            if subset is not None:
                li = subset[bi]
                if li.size == 0:
                    continue
                blk = block.subset(li)
                gids = self._block_offset[bi] + li
            else:
                blk = block
                gids = self._block_offset[bi] + np.arange(block.count)
            for t_mat in _block_candidates(blk, o, d):
                t, gid = _reduce_nearest(t_mat, blk.shape_id, gids, t_min, t_max)
                sid = np.where(gid >= 0, _sid_of(self, gid), _BIG)
                take = (t < best_t) | ((t == best_t) & np.isfinite(t) & (sid < best_sid))
                best_sid = np.where(take, sid, best_sid)
                best_gid = np.where(take, gid, best_gid)
                best_t = np.where(take, t, best_t)
        return best_t, best_gid

    def _nearest(self, o, d, t_min, t_max):
        n = o.shape[0]
        if self.n_prims == 0:
            return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
        if self.bvh is None:
            return self._scan_blocks(o, d, t_min, t_max)

        best_t = np.full(n, np.inf)
        best_sid = np.full(n, _BIG, dtype=np.int64)
        best_gid = np.full(n, -1, dtype=np.int64)
        inv_d = 1.0 / np.where(np.abs(d) < 1e-300, np.copysign(1e-300, d), d)
        stack = [0]
        while stack:
            node = stack.pop()
            alive = self.bvh.hits_node(node, o, inv_d, t_min, np.minimum(t_max, best_t))
            if not alive.any():
                continue
            if self.bvh.count[node] > 0:
                lo = self.bvh.start[node]
                ids = self.bvh.order[lo : lo + self.bvh.count[node]]
                subset = [
                    self.prim_local[ids[self.prim_block[ids] == bi]]
                    for bi in range(len(self.blocks))
                ]
                t, gid = self._scan_blocks(o, d, t_min, t_max, subset)
                sid = np.where(gid >= 0, _sid_of(self, gid), _BIG)
                take = (t < best_t) | ((t == best_t) & np.isfinite(t) & (sid < best_sid))
                best_sid = np.where(take, sid, best_sid)
                best_gid = np.where(take, gid, best_gid)
                best_t = np.where(take, t, best_t)
            else:
                stack.append(int(self.bvh.left[node]))
                stack.append(int(self.bvh.right[node]))
        return best_t, best_gid

    # -- public API ---------------------------------------------------------

    def intersect(self, ray: Ray) -> SurfaceInteraction:
        """Nearest hit per ray; misses are lanes with valid == False."""
        o, d = ray.origin, ray.direction
        t, prim = self._nearest(o, d, ray.t_min, ray.t_max)
        valid = np.isfinite(t)
        n = o.shape[0]
        t_safe = np.where(valid, t, 0.0)
        pos = np.where(valid[:, None], o + t_safe[:, None] * d, 0.0)
        normal = np.zeros((n, 3))
        uv = np.zeros((n, 2))
        shape_id = np.full(n, -1, dtype=np.int64)
        material = np.full(n, -1, dtype=np.int64)
        emitter = np.full(n, -1, dtype=np.int64)
        medium = np.full(n, -1, dtype=np.int64)

        safe_prim = np.where(valid, prim, 0)
        for bi, block in enumerate(self.blocks):
            sel = valid & (self.prim_block[safe_prim] == bi)
            if not sel.any():
                continue
            li = self.prim_local[safe_prim[sel]]
            shape_id[sel] = block.shape_id[li]
            material[sel] = block.material[li]
            emitter[sel] = block.emitter[li]
            medium[sel] = block.medium[li]
            if block.kind == KIND_SPHERE:
                c = block.data["center"][li]
                r = block.data["radius"][li]
                nrm = (pos[sel] - c) / r[:, None]
                normal[sel] = nrm
                uv[sel, 0] = 0.5 + np.arctan2(nrm[:, 1], nrm[:, 0]) / (2 * np.pi)
                uv[sel, 1] = 0.5 + np.arcsin(np.clip(nrm[:, 2], -1, 1)) / np.pi
            elif block.kind == KIND_RECTANGLE:
                normal[sel] = block.data["n"][li]
                c = block.data["center"][li]
                eu = block.data["eu"][li]
                ev = block.data["ev"][li]
                rel = pos[sel] - c
                uv[sel, 0] = 0.5 * (np.sum(rel * eu, axis=-1) * block.data["ieu2"][li] + 1.0)
                uv[sel, 1] = 0.5 * (np.sum(rel * ev, axis=-1) * block.data["iev2"][li] + 1.0)
            else:
                normal[sel] = block.data["n"][li]
                v0 = block.data["v0"][li]
                e1 = block.data["e1"][li]
                e2 = block.data["e2"][li]
                rel = pos[sel] - v0
                d00 = np.sum(e1 * e1, axis=-1)
                d01 = np.sum(e1 * e2, axis=-1)
                d11 = np.sum(e2 * e2, axis=-1)
                d20 = np.sum(rel * e1, axis=-1)
                d21 = np.sum(rel * e2, axis=-1)
                den = d00 * d11 - d01 * d01
                den = np.where(np.abs(den) < 1e-300, 1.0, den)
                uv[sel, 0] = (d11 * d20 - d01 * d21) / den
                uv[sel, 1] = (d00 * d21 - d01 * d20) / den

        si = SurfaceInteraction(
            valid=valid,
            position=pos,
            geometric_normal=normal,
            shading_normal=normal.copy(),
            uv=uv,
            distance=np.where(valid, t, np.inf),
            shape_id=shape_id,
            material_id=material,
            prim_index=prim,
        )
        si.emitter_id = emitter
        si.medium_id = medium
        si.orient_to(-d)
        return si

    def occluded(self, origin, target, eps=1e-4):
        """True where the open segment origin -> target is blocked."""
        delta = target - origin
        dist = np.sqrt(np.sum(delta * delta, axis=-1))
        safe = np.where(dist > 0.0, dist, 1.0)
        d = delta / safe[:, None]
        t, _ = self._nearest(
            origin, d, np.full(dist.shape, eps), dist * (1.0 - 1e-6)
        )
        return np.isfinite(t)


def _sid_of(geom: Geometry, gid):
    """shape_id for global primitive ids (gid >= 0)."""
    bi = geom.prim_block[gid]
    li = geom.prim_local[gid]
    out = np.empty(gid.shape, dtype=np.int64)
    for b in range(len(geom.blocks)):
        sel = bi == b
        if sel.any():
            out[sel] = geom.blocks[b].shape_id[li[sel]]
    return out
