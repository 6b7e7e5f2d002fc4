"""Stage-2 differentiable mesh renderer (ray casting).

Per pixel the nearest ray-triangle intersection is found with a BVH and a
Moller-Trumbore test. The hit point x is rebuilt on the tape as the
barycentric combination of the triangle's vertices with the barycentric
coordinates FROZEN, so gradients reach (a) field/head parameters through
the color decode at x and (b) vertex positions through depth and x itself.
Pixel coverage (hit vs miss) carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .bundle import RenderBundle
from .cameras import Camera, rays_for_rect
from .extract import Mesh
from .field import TensorField, query_batch
from .heads import HeadSet, decode_color

__all__ = ["BVH", "build_bvh", "intersect_bvh", "intersect_brute",
           "raycast_rays", "raycast_view"]

_EPS_DET = 1e-12
_T_MIN = 1e-9


@dataclass
class BVH:
    lo: np.ndarray      # (nodes, 3)
    hi: np.ndarray      # (nodes, 3)
    left: np.ndarray    # child index or -1
    right: np.ndarray
    start: np.ndarray   # leaf triangle range into `order`
    count: np.ndarray   # 0 for internal nodes
    order: np.ndarray   # permuted triangle indices


def build_bvh(vertices: np.ndarray, triangles: np.ndarray,
              leaf_size: int = 8) -> BVH:
    tri_lo = vertices[triangles].min(axis=1)
    tri_hi = vertices[triangles].max(axis=1)
    centers = 0.5 * (tri_lo + tri_hi)
    n_tris = triangles.shape[0]
    order = np.arange(n_tris)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def emit(ids: np.ndarray) -> int:
        node = len(lo)
        lo.append(tri_lo[ids].min(axis=0))
        hi.append(tri_hi[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        if ids.size <= leaf_size:
            start[node] = len(leaf_tris)
            count[node] = ids.size
            leaf_tris.extend(ids.tolist())
            return node
        ext = centers[ids].max(axis=0) - centers[ids].min(axis=0)
        axis = int(np.argmax(ext))
        mid = ids.size // 2
        part = ids[np.argsort(centers[ids, axis], kind="stable")]
        left[node] = emit(part[:mid])
        right[node] = emit(part[mid:])
        return node

    leaf_tris: list[int] = []
    import sys
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10000))
    try:
        emit(order)
    finally:
        sys.setrecursionlimit(limit)
    return BVH(np.array(lo), np.array(hi), np.array(left, dtype=np.int64),
               np.array(right, dtype=np.int64),
               np.array(start, dtype=np.int64),
               np.array(count, dtype=np.int64),
               np.array(leaf_tris, dtype=np.int64))


def _moller_trumbore(v0, v1, v2, origins, dirs):
    """Pairwise ray-triangle test; returns (ok, t, u, v)."""
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tvec = origins - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.einsum("ij,ij->i", dirs, qvec) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
    ok = (np.abs(det) > _EPS_DET) & (u >= 0) & (v >= 0) & (u + v <= 1.0) \
        & (t > _T_MIN)
    return ok, t, u, v


def intersect_brute(vertices: np.ndarray, triangles: np.ndarray,
                    origins: np.ndarray, dirs: np.ndarray):
    """All-pairs nearest intersection; independent oracle for tests."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    best_uv = np.zeros((n, 2))
    for ti, tri in enumerate(triangles):
        v0 = np.broadcast_to(vertices[tri[0]], origins.shape)
        v1 = np.broadcast_to(vertices[tri[1]], origins.shape)
        v2 = np.broadcast_to(vertices[tri[2]], origins.shape)
        ok, t, u, v = _moller_trumbore(v0, v1, v2, origins, dirs)
        closer = ok & (t < best_t)
        best_t[closer] = t[closer]
        best_tri[closer] = ti
        best_uv[closer, 0] = u[closer]
        best_uv[closer, 1] = v[closer]
    hit = best_tri >= 0
    return hit, best_tri, best_t, best_uv


def intersect_bvh(bvh: BVH, vertices: np.ndarray, triangles: np.ndarray,
                  origins: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray via frontier traversal of (ray, node) pairs."""
    n = origins.shape[0]
    inv = 1.0 / np.where(np.abs(dirs) < 1e-30, 1e-30, dirs)
    cand_ray, cand_tri, cand_t, cand_u, cand_v = [], [], [], [], []
    rays = np.arange(n)
    nodes = np.zeros(n, dtype=np.int64)
    while rays.size:
        t0 = (bvh.lo[nodes] - origins[rays]) * inv[rays]
        t1 = (bvh.hi[nodes] - origins[rays]) * inv[rays]
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        ok = (tmax >= np.maximum(tmin, 0.0))
        rays, nodes = rays[ok], nodes[ok]
        if rays.size == 0:
            break
        leaf = bvh.count[nodes] > 0
        if np.any(leaf):
            l_rays = rays[leaf]
            l_nodes = nodes[leaf]
            max_c = int(bvh.count[l_nodes].max())
            for s in range(max_c):
                has = bvh.count[l_nodes] > s
                rr = l_rays[has]
                tt = bvh.order[bvh.start[l_nodes[has]] + s]
                tri = triangles[tt]
                ok2, t, u, v = _moller_trumbore(
                    vertices[tri[:, 0]], vertices[tri[:, 1]],
                    vertices[tri[:, 2]], origins[rr], dirs[rr])
                if np.any(ok2):
                    cand_ray.append(rr[ok2])
                    cand_tri.append(tt[ok2])
                    cand_t.append(t[ok2])
                    cand_u.append(u[ok2])
                    cand_v.append(v[ok2])
        internal = ~leaf
        i_rays = rays[internal]
        i_nodes = nodes[internal]
        rays = np.concatenate([i_rays, i_rays])
        nodes = np.concatenate([bvh.left[i_nodes], bvh.right[i_nodes]])

    hit = np.zeros(n, dtype=bool)
    best_tri = np.full(n, -1, dtype=np.int64)
    best_t = np.full(n, np.inf)
    best_uv = np.zeros((n, 2))
    if cand_ray:
        cr = np.concatenate(cand_ray)
        ct = np.concatenate(cand_tri)
        cT = np.concatenate(cand_t)
        cu = np.concatenate(cand_u)
        cv = np.concatenate(cand_v)
        order = np.lexsort((cT, cr))
        cr, ct, cT, cu, cv = cr[order], ct[order], cT[order], cu[order], cv[order]
        first = np.ones(cr.size, dtype=bool)
        first[1:] = cr[1:] != cr[:-1]
        hit[cr[first]] = True
        best_tri[cr[first]] = ct[first]
        best_t[cr[first]] = cT[first]
        best_uv[cr[first], 0] = cu[first]
        best_uv[cr[first], 1] = cv[first]
    return hit, best_tri, best_t, best_uv


def raycast_rays(mesh: Mesh, field: TensorField, heads: HeadSet,
                 origins: np.ndarray, dirs: np.ndarray,
                 bvh: BVH | None = None):
    """Render a ray batch off the mesh; returns per-ray Vars.

    Output rows for missed rays are zero. Returns (rgb, albedo, mask,
    depth, hit) where mask/hit are constants (coverage without gradient).
    """
    n = origins.shape[0]
    if mesh.empty:
        z3 = Var(np.zeros((n, 3)))
        z1 = Var(np.zeros(n))
        return z3, z3, np.zeros(n), z1, np.zeros(n, dtype=bool)
    if bvh is None:
        bvh = build_bvh(mesh.vertices, mesh.triangles)
    hit, tri_idx, t_hit, uv = intersect_bvh(bvh, mesh.vertices,
                                            mesh.triangles, origins, dirs)
    if not np.any(hit):
        z3 = Var(np.zeros((n, 3)))
        z1 = Var(np.zeros(n))
        return z3, z3, np.zeros(n), z1, hit
    hidx = np.nonzero(hit)[0]
    tris = mesh.triangles[tri_idx[hidx]]
    u = uv[hidx, 0:1]
    v = uv[hidx, 1:2]
    w0 = 1.0 - u - v
    vert = mesh.vertices_var if mesh.vertices_var is not None \
        else ad.as_var(mesh.vertices)
    p0 = ad.gather(vert, tris[:, 0])
    p1 = ad.gather(vert, tris[:, 1])
    p2 = ad.gather(vert, tris[:, 2])
    x = p0 * ad.as_var(w0) + p1 * ad.as_var(u) + p2 * ad.as_var(v)
    d_hit = dirs[hidx].astype(x.data.dtype)
    o_hit = origins[hidx].astype(x.data.dtype)
    depth_hit = ad.vsum((x - ad.as_var(o_hit)) * ad.as_var(d_hit), axis=1)
    feat = query_batch(field, x)
    c_a, c_r = decode_color(heads, feat, x)
    rgb_hit = c_a * c_r
    rgb = ad.scatter_rows(rgb_hit, hidx, n)
    albedo = ad.scatter_rows(c_a, hidx, n)
    depth = ad.scatter_rows(depth_hit, hidx, n)
    mask = hit.astype(np.float64)
    return rgb, albedo, mask, depth, hit


def raycast_view(mesh: Mesh, field: TensorField, heads: HeadSet,
                 camera: Camera) -> RenderBundle:
    """Non-differentiable full-view mesh render to a RenderBundle."""
    origins, dirs, _ = rays_for_rect(camera, 0, 0, camera.width,
                                     camera.height)
    with ad.no_grad():
        rgb, albedo, mask, depth, _ = raycast_rays(
            mesh, field, heads, origins, dirs)
    h, w = camera.height, camera.width
    return RenderBundle(
        rgb=np.asarray(rgb.data, dtype=np.float64).reshape(h, w, 3),
        albedo=np.asarray(albedo.data, dtype=np.float64).reshape(h, w, 3),
        mask=mask.reshape(h, w),
        depth=np.asarray(depth.data, dtype=np.float64).reshape(h, w))
