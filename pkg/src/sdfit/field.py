"""Vector-matrix factorized feature field.

One shared field supplies both geometry and appearance features. A query
at point p concatenates, per axis, the linearly interpolated vector factor
times the bilinearly interpolated matrix factor of the orthogonal plane,
giving a feature of length 3*channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import Var, as_var

__all__ = ["TensorField", "init_field", "query", "query_batch"]

# axis m pairs with the plane spanned by the other two axes
_PLANE_AXES = ((1, 2), (2, 0), (0, 1))  # X->YZ, Y->ZX, Z->XY


@dataclass
class TensorField:
    resolution: int
    channels: int
    vectors: list[Var]   # three (N, R) factors for axes X, Y, Z
    matrices: list[Var]  # three (N, N, R) factors for planes YZ, ZX, XY
    bounds: np.ndarray = dc_field(
        default_factory=lambda: np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]))

    @property
    def feature_dim(self) -> int:
        return 3 * self.channels

    def params(self) -> list[Var]:
        return self.vectors + self.matrices

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())


def init_field(resolution: int = 64, channels: int = 40, scale: float = 0.1,
               seed: int = 0, dtype=np.float32,
               bounds: np.ndarray | None = None) -> TensorField:
    """Uniform [-scale, scale] factors from a seeded generator."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    rng = np.random.Generator(np.random.PCG64(seed))
    n, r = resolution, channels
    vectors = [Var(rng.uniform(-scale, scale, (n, r)).astype(dtype), requires=True)
               for _ in range(3)]
    matrices = [Var(rng.uniform(-scale, scale, (n, n, r)).astype(dtype), requires=True)
                for _ in range(3)]
    b = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]) if bounds is None \
        else np.asarray(bounds, dtype=np.float64)
    return TensorField(resolution=n, channels=r, vectors=vectors,
                       matrices=matrices, bounds=b)


def _grid_coords(field: TensorField, pts: np.ndarray):
    """Continuous lattice coords, clamped; returns (i0, frac, inside)."""
    n = field.resolution
    lo, hi = field.bounds[0], field.bounds[1]
    scale = (n - 1) / (hi - lo)
    u_raw = (pts.astype(np.float64) - lo) * scale
    inside = (u_raw >= 0.0) & (u_raw <= n - 1)
    u = np.clip(u_raw, 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 2)
    frac = u - i0
    return i0, frac, inside, scale


def query_batch(field: TensorField, points) -> Var:
    """Features for a (P, 3) batch of world points; row i is query(points[i])."""
    pts_var = points if isinstance(points, Var) else None
    pts = np.asarray(points.data if pts_var is not None else points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("query points must be finite")
    n, r = field.resolution, field.channels
    p_count = pts.shape[0]
    dtype = field.vectors[0].data.dtype
    if p_count == 0:
        return Var(np.zeros((0, 3 * r), dtype=dtype))

    i0, frac, inside, scale = _grid_coords(field, pts)
    i1 = i0 + 1
    fr = frac.astype(dtype)

    vec_interp = []
    vec_diff = []
    for m in range(3):
        v = field.vectors[m].data
        v0, v1 = v[i0[:, m]], v[i1[:, m]]
        vec_interp.append(v0 + (v1 - v0) * fr[:, m:m + 1])
        vec_diff.append(v1 - v0)

    mat_interp = []
    mat_corners_idx = []
    for m, (a, b) in enumerate(_PLANE_AXES):
        mat = field.matrices[m].data.reshape(n * n, r)
        ja0, ja1 = i0[:, a], i1[:, a]
        jb0, jb1 = i0[:, b], i1[:, b]
        fa, fb = fr[:, a:a + 1], fr[:, b:b + 1]
        c00 = mat[ja0 * n + jb0]
        c01 = mat[ja0 * n + jb1]
        c10 = mat[ja1 * n + jb0]
        c11 = mat[ja1 * n + jb1]
        top = c00 + (c01 - c00) * fb
        bot = c10 + (c11 - c10) * fb
        mat_interp.append(top + (bot - top) * fa)
        mat_corners_idx.append((ja0, ja1, jb0, jb1))

    out = np.concatenate([vec_interp[m] * mat_interp[m] for m in range(3)], axis=1)

    want_p = pts_var is not None and pts_var.requires
    parents = tuple(field.vectors) + tuple(field.matrices)
    if want_p:
        parents = parents + (pts_var,)
    ch = np.arange(r, dtype=np.int64)

    def vjp(g):
        grads_v = []
        grads_m = []
        gp = np.zeros((p_count, 3), dtype=np.float64) if want_p else None
        for m in range(3):
            gm = g[:, m * r:(m + 1) * r]
            g_vec = gm * mat_interp[m]
            g_mat = gm * vec_interp[m]
            # vector factor: scatter the two line endpoints
            fm = fr[:, m:m + 1]
            idx0 = (i0[:, m, None] * r + ch).ravel()
            idx1 = (i1[:, m, None] * r + ch).ravel()
            acc = np.bincount(
                np.concatenate([idx0, idx1]),
                weights=np.concatenate([(g_vec * (1.0 - fm)).ravel(),
                                        (g_vec * fm).ravel()]),
                minlength=n * r)
            grads_v.append(acc.reshape(n, r).astype(dtype))
            # matrix factor: scatter the four bilinear corners
            a, b = _PLANE_AXES[m]
            ja0, ja1, jb0, jb1 = mat_corners_idx[m]
            fa, fb = fr[:, a:a + 1], fr[:, b:b + 1]
            w00 = (1.0 - fa) * (1.0 - fb)
            w01 = (1.0 - fa) * fb
            w10 = fa * (1.0 - fb)
            w11 = fa * fb
            node = [(ja0 * n + jb0), (ja0 * n + jb1), (ja1 * n + jb0), (ja1 * n + jb1)]
            flat = np.concatenate([(nd[:, None] * r + ch).ravel() for nd in node])
            vals = np.concatenate([(g_mat * w).ravel() for w in (w00, w01, w10, w11)])
            accm = np.bincount(flat, weights=vals, minlength=n * n * r)
            grads_m.append(accm.reshape(n, n, r).astype(dtype))
            if gp is not None:
                mat = field.matrices[m].data.reshape(n * n, r)
                c00, c01 = mat[node[0]], mat[node[1]]
                c10, c11 = mat[node[2]], mat[node[3]]
                dmat_dfa = (c10 - c00) * (1.0 - fb) + (c11 - c01) * fb
                dmat_dfb = (c01 - c00) * (1.0 - fa) + (c11 - c10) * fa
                gp[:, m] += np.sum(g_vec * vec_diff[m], axis=1) * scale[m]
                gp[:, a] += np.sum(g_mat * dmat_dfa, axis=1) * scale[a]
                gp[:, b] += np.sum(g_mat * dmat_dfb, axis=1) * scale[b]
        out_grads = grads_v + grads_m
        if gp is not None:
            out_grads.append((gp * inside).astype(pts_var.data.dtype))
        return tuple(out_grads)

    return Var.from_op(out, parents, vjp)


def query(field: TensorField, p) -> Var:
    """Feature vector of a single world point, shape (3*channels,)."""
    p_var = p if isinstance(p, Var) else as_var(np.asarray(p, dtype=np.float64))
    from .autodiff import reshape
    flat = reshape(p_var, (1, 3))
    return reshape(query_batch(field, flat), (3 * field.channels,))
