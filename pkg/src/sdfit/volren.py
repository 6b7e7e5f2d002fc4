"""Stage-1 differentiable volume renderer.

Rays are clipped to the field's bounding box, sampled with stratified
coarse samples plus importance samples from the coarse density histogram,
and composited with transmittance weights:

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i

Sample jitter is a pure hash of (seed, pixel, index), so a patch render
is bit-identical to the matching crop of a full render.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .bundle import RenderBundle
from .cameras import Camera, rays_for_rect
from .density import BetaSchedule, sdf_to_density
from .field import TensorField, query_batch
from .heads import HeadSet, decode_color, decode_sdf

__all__ = ["RenderConfig", "ray_box_clip", "sample_ray", "render_rays",
           "render_pixel", "render_view", "composite"]


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    depth_eps: float = 1e-6
    chunk: int = 4096


# --------------------------------------------------------------- jitter hash

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M2
    z = (z ^ (z >> np.uint64(27))) * _M3
    return z ^ (z >> np.uint64(31))


def hash_uniform(seed: int, *keys: np.ndarray) -> np.ndarray:
    """Deterministic uniforms in [0,1) from integer keys (vectorized)."""
    h = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * np.uint64(1)
    acc = None
    for k in keys:
        k64 = np.asarray(k).astype(np.uint64)
        h_arr = (k64 + _M1) if acc is None else (acc + k64 + _M1)
        acc = _mix(h_arr * _M1 + h)
    return (acc >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


# ----------------------------------------------------------------- sampling

def ray_box_clip(origins: np.ndarray, dirs: np.ndarray, bounds: np.ndarray):
    """Slab test: (near, far, hit) of each ray against the box."""
    d = np.where(np.abs(dirs) < 1e-30, 1e-30, dirs)
    inv = 1.0 / d
    t0 = (bounds[0] - origins) * inv
    t1 = (bounds[1] - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    near = np.maximum(tmin, 1e-4)
    hit = tmax > near
    return near, tmax, hit


def _stratified(near, far, n, u):
    """Per-ray stratified positions from uniforms u of shape (rays, n)."""
    steps = (np.arange(n) + u) / n
    return near[:, None] + (far - near)[:, None] * steps


def _sample_pdf(t_bins: np.ndarray, weights: np.ndarray, u: np.ndarray):
    """Inverse-CDF draws from a piecewise-constant pdf over bins.

    t_bins: (rays, n+1) bin edges; weights: (rays, n) >= 0;
    u: (rays, m) uniforms. Falls back to uniform when weights vanish.
    """
    w = np.maximum(weights, 0.0)
    total = w.sum(axis=1, keepdims=True)
    uniform = total <= 1e-12
    w = np.where(uniform, 1.0, w)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pdf, axis=1)
    cdf = np.concatenate([np.zeros_like(cdf[:, :1]), cdf], axis=1)
    cdf[:, -1] = 1.0
    idx = np.maximum(
        (cdf[:, None, :-1] <= u[:, :, None]).sum(axis=2) - 1, 0)
    rows = np.arange(u.shape[0])[:, None]
    c_lo = np.take_along_axis(cdf, idx, axis=1)
    p_bin = np.take_along_axis(pdf, idx, axis=1)
    frac = np.where(p_bin > 0, (u - c_lo) / np.maximum(p_bin, 1e-12), 0.5)
    lo = np.take_along_axis(t_bins, idx, axis=1)
    hi = np.take_along_axis(t_bins, idx + 1, axis=1)
    del rows
    return lo + np.clip(frac, 0.0, 1.0) * (hi - lo)


def sample_ray(origins: np.ndarray, dirs: np.ndarray, near: np.ndarray,
               far: np.ndarray, n_coarse: int, n_fine: int, seed: int,
               pixels: np.ndarray | None = None, weight_fn=None):
    """Ordered sample distances and interval lengths for each ray.

    Coarse samples are stratified; fine samples are drawn from the
    histogram of `weight_fn` evaluated at the coarse positions (uniform
    fallback when the histogram is empty). Deterministic given seed.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if np.any(far <= near):
        raise ValueError("degenerate ray interval: far must exceed near")
    n_rays = origins.shape[0]
    if pixels is None:
        pixels = np.stack([np.arange(n_rays), np.zeros(n_rays, dtype=int)],
                          axis=1)
    px = pixels[:, 0][:, None]
    py = pixels[:, 1][:, None]
    sample_ids = np.broadcast_to(np.arange(n_coarse), (n_rays, n_coarse))
    u = hash_uniform(seed, px, py, sample_ids, np.zeros_like(sample_ids))
    t = _stratified(near, far, n_coarse, u)
    if n_fine > 0:
        if weight_fn is not None:
            pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
            w = np.asarray(weight_fn(pts.reshape(-1, 3))).reshape(n_rays,
                                                                  n_coarse)
        else:
            w = np.zeros((n_rays, n_coarse))
        edges = np.concatenate(
            [near[:, None], 0.5 * (t[:, 1:] + t[:, :-1]), far[:, None]],
            axis=1)
        fine_ids = np.broadcast_to(np.arange(n_fine), (n_rays, n_fine))
        u2 = hash_uniform(seed, px, py, fine_ids, np.ones_like(fine_ids))
        t_fine = _sample_pdf(edges, w, u2)
        t = np.sort(np.concatenate([t, t_fine], axis=1), axis=1)
    deltas = np.diff(np.concatenate([t, far[:, None]], axis=1), axis=1)
    return t, deltas


# ------------------------------------------------------------- compositing

def composite(sigma: Var, deltas: np.ndarray, t_vals: np.ndarray,
              c_a: Var, c_r: Var, depth_eps: float = 1e-6):
    """Transmittance quadrature over per-ray samples.

    sigma: (rays, S) Var; deltas, t_vals: (rays, S) arrays;
    c_a, c_r: (rays, S, 3) Vars. Returns (rgb, albedo, mask, depth) Vars.
    """
    tau = ad.mul(sigma, ad.as_var(deltas))
    alpha = 1.0 - ad.exp(ad.neg(tau))
    accum = ad.sub(ad.cumsum(tau, axis=1), tau)  # exclusive prefix sum
    trans = ad.exp(ad.neg(accum))
    wgt = ad.mul(trans, alpha)
    w3 = ad.reshape(wgt, wgt.data.shape + (1,))
    rgb = ad.vsum(ad.mul(w3, ad.mul(c_a, c_r)), axis=1)
    albedo = ad.vsum(ad.mul(w3, c_a), axis=1)
    mask = ad.vsum(wgt, axis=1)
    depth = ad.div(ad.vsum(ad.mul(wgt, ad.as_var(t_vals)), axis=1),
                   ad.maximum(mask, ad.as_var(depth_eps)))
    return rgb, albedo, mask, depth


def render_rays(field: TensorField, heads: HeadSet, sched: BetaSchedule,
                origins: np.ndarray, dirs: np.ndarray,
                cfg: RenderConfig, seed: int,
                pixels: np.ndarray | None = None, beta_var: Var | None = None):
    """Differentiable render of a ray batch.

    Returns (rgb, albedo, mask, depth) Vars over the rays that hit the
    bounding box, plus the boolean hit mask into the input ray order.
    """
    near, far, hit = ray_box_clip(origins, dirs, field.bounds)
    if not np.any(hit):
        return None, hit
    o, d = origins[hit], dirs[hit]
    px = pixels[hit] if pixels is not None else None
    beta = beta_var if beta_var is not None else sched.beta_var()

    weight_fn = None
    if cfg.n_fine > 0:
        def weight_fn(pts):
            with ad.no_grad():
                feat = query_batch(field, pts)
                s = decode_sdf(heads, feat, pts.astype(feat.data.dtype))
                return sdf_to_density(s, float(beta.data)).data

    t, deltas = sample_ray(o, d, near[hit], far[hit], cfg.n_coarse,
                           cfg.n_fine, seed, pixels=px, weight_fn=weight_fn)
    n_rays, n_s = t.shape
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    feat = query_batch(field, pts)
    pts_c = pts.astype(feat.data.dtype)
    s = decode_sdf(heads, feat, pts_c)
    sigma = ad.reshape(sdf_to_density(s, beta), (n_rays, n_s))
    c_a, c_r = decode_color(heads, feat, pts_c)
    c_a = ad.reshape(c_a, (n_rays, n_s, 3))
    c_r = ad.reshape(c_r, (n_rays, n_s, 3))
    out = composite(sigma, deltas, t, c_a, c_r, cfg.depth_eps)
    return out, hit


def render_pixel(field: TensorField, heads: HeadSet, sched: BetaSchedule,
                 origin: np.ndarray, direction: np.ndarray,
                 cfg: RenderConfig | None = None, seed: int = 0,
                 pixel: tuple[int, int] = (0, 0)):
    """Single-ray render; returns (rgb, albedo, mask, depth) Vars."""
    cfg = cfg or RenderConfig()
    origins = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    dirs = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    pixels = np.asarray(pixel, dtype=np.int64).reshape(1, 2)
    out, hit = render_rays(field, heads, sched, origins, dirs, cfg, seed,
                           pixels=pixels)
    if out is None:
        z3 = Var(np.zeros(3))
        z = Var(np.zeros(()))
        return z3, z3, z, z
    rgb, albedo, mask, depth = out
    return (ad.reshape(rgb, (3,)), ad.reshape(albedo, (3,)),
            ad.reshape(mask, ()), ad.reshape(depth, ()))


def render_view(field: TensorField, heads: HeadSet, sched: BetaSchedule,
                camera: Camera, patch: tuple[int, int, int, int] | None = None,
                cfg: RenderConfig | None = None, seed: int = 0) -> RenderBundle:
    """Non-differentiable full or patch render to a RenderBundle.

    `patch` is (x0, y0, w, h) inside the image; background is black with
    the mask carrying coverage; depth is zeroed where mask < 0.5.
    """
    cfg = cfg or RenderConfig()
    x0, y0, w, h = patch if patch is not None else (0, 0, camera.width,
                                                    camera.height)
    if x0 < 0 or y0 < 0 or x0 + w > camera.width or y0 + h > camera.height:
        raise ValueError("patch outside the image")
    origins, dirs, pixels = rays_for_rect(camera, x0, y0, w, h)
    n = origins.shape[0]
    rgb = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    mask = np.zeros(n)
    depth = np.zeros(n)
    with ad.no_grad():
        beta = sched.beta_var()
        for lo in range(0, n, cfg.chunk):
            hi = min(lo + cfg.chunk, n)
            out, hit = render_rays(field, heads, sched, origins[lo:hi],
                                   dirs[lo:hi], cfg, seed,
                                   pixels=pixels[lo:hi], beta_var=beta)
            if out is None:
                continue
            idx = np.nonzero(hit)[0] + lo
            rgb[idx] = out[0].data
            albedo[idx] = out[1].data
            mask[idx] = out[2].data
            depth[idx] = out[3].data
    depth[mask < 0.5] = 0.0
    return RenderBundle(rgb=rgb.reshape(h, w, 3).clip(0.0, 1.0),
                        albedo=albedo.reshape(h, w, 3).clip(0.0, 1.0),
                        mask=mask.reshape(h, w).clip(0.0, 1.0),
                        depth=depth.reshape(h, w))
