"""Analytic ground-truth scenes.

Scenes are unions of SDF primitives with per-primitive albedo and a single
directional light plus ambient term. A sphere-tracing renderer (independent
of the differentiable pipeline) produces reference bundles whose rgb equals
albedo * shading exactly, so the fitted decomposition can be checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .bundle import RenderBundle
from .cameras import Camera, orbit_rig, rays_for_rect

__all__ = ["Primitive", "SceneSpec", "scene_sdf", "scene_albedo", "render_gt",
           "scene_cameras", "sphere_scene", "torus_scene",
           "scene_to_dict", "scene_from_dict"]


@dataclass
class Primitive:
    kind: str                      # "sphere" | "box" | "torus"
    center: np.ndarray
    size: np.ndarray               # sphere: (r,), box: half-extents, torus: (R, r)
    albedo_kind: str = "constant"  # "constant" | "gradient"
    rgb: np.ndarray = dc_field(default_factory=lambda: np.array([0.75, 0.35, 0.25]))
    rgb1: np.ndarray | None = None  # gradient end color
    axis: int = 0                   # gradient axis

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb1 is not None:
            self.rgb1 = np.asarray(self.rgb1, dtype=np.float64)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - self.center
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            a = np.abs(q) - self.size
            outer = np.linalg.norm(np.maximum(a, 0.0), axis=-1)
            inner = np.minimum(a.max(axis=-1), 0.0)
            return outer + inner
        if self.kind == "torus":
            ring = np.hypot(np.hypot(q[..., 0], q[..., 1]) - self.size[0],
                            q[..., 2])
            return ring - self.size[1]
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def albedo(self, p: np.ndarray) -> np.ndarray:
        if self.albedo_kind == "constant":
            return np.broadcast_to(self.rgb, p.shape[:-1] + (3,)).copy()
        t = np.clip((p[..., self.axis] + 1.0) * 0.5, 0.0, 1.0)[..., None]
        return self.rgb * (1.0 - t) + self.rgb1 * t


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    light_dir: np.ndarray = dc_field(
        default_factory=lambda: np.array([0.45, -0.35, 0.82]))
    ambient: float = 0.25
    smooth_k: float = 0.0  # 0 disables the smooth union
    n_views: int = 8
    elevations_deg: tuple = (-5.0, 15.0, 30.0)
    orbit_radius: float = 2.4
    image_size: int = 128
    frame: float = 1.05

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)


def _smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1.0 - h) + a * h - k * h * (1.0 - h)


def scene_sdf(spec: SceneSpec, p) -> np.ndarray:
    """Signed distance of the primitive union at world points p."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    d = spec.primitives[0].sdf(pts)
    for prim in spec.primitives[1:]:
        di = prim.sdf(pts)
        d = _smooth_min(d, di, spec.smooth_k) if spec.smooth_k > 0 \
            else np.minimum(d, di)
    return d[0] if single else d


def scene_albedo(spec: SceneSpec, p: np.ndarray) -> np.ndarray:
    """Albedo of the nearest primitive at each point."""
    pts = np.atleast_2d(p)
    dists = np.stack([prim.sdf(pts) for prim in spec.primitives], axis=0)
    nearest = np.argmin(dists, axis=0)
    out = np.zeros(pts.shape[:-1] + (3,))
    for i, prim in enumerate(spec.primitives):
        sel = nearest == i
        if np.any(sel):
            out[sel] = prim.albedo(pts[sel])
    return out


def _normals(spec: SceneSpec, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(p)
    for ax in range(3):
        dp = np.zeros(3)
        dp[ax] = h
        g[:, ax] = scene_sdf(spec, p + dp) - scene_sdf(spec, p - dp)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.maximum(norm, 1e-12)


def render_gt(spec: SceneSpec, camera: Camera, max_steps: int = 256,
              hit_eps: float = 1e-6) -> RenderBundle:
    """Sphere-traced reference render; rgb = albedo * shading exactly."""
    h, w = camera.height, camera.width
    origins, dirs, _ = rays_for_rect(camera, 0, 0, w, h)
    n_rays = origins.shape[0]
    t = np.zeros(n_rays)
    t_max = spec.orbit_radius + 3.0
    alive = np.ones(n_rays, dtype=bool)
    hit = np.zeros(n_rays, dtype=bool)
    for _ in range(max_steps):
        if not np.any(alive):
            break
        idx = np.nonzero(alive)[0]
        pts = origins[idx] + t[idx, None] * dirs[idx]
        s = scene_sdf(spec, pts)
        newly_hit = s < hit_eps
        hit[idx[newly_hit]] = True
        alive[idx[newly_hit]] = False
        t[idx] += np.maximum(s, 0.0)
        over = t[idx] > t_max
        alive[idx[over]] = False

    rgb = np.zeros((n_rays, 3))
    albedo = np.zeros((n_rays, 3))
    mask = np.zeros(n_rays)
    depth = np.zeros(n_rays)
    if np.any(hit):
        hp = origins[hit] + t[hit, None] * dirs[hit]
        nrm = _normals(spec, hp)
        lambert = np.maximum(0.0, nrm @ spec.light_dir)
        shading = spec.ambient + (1.0 - spec.ambient) * lambert
        alb = scene_albedo(spec, hp)
        albedo[hit] = alb
        rgb[hit] = alb * shading[:, None]
        mask[hit] = 1.0
        depth[hit] = t[hit]
    return RenderBundle(rgb=rgb.reshape(h, w, 3), albedo=albedo.reshape(h, w, 3),
                        mask=mask.reshape(h, w), depth=depth.reshape(h, w))


def scene_cameras(spec: SceneSpec, azimuth_offset_deg: float = 0.0,
                  n_views: int | None = None) -> list[Camera]:
    return orbit_rig(n_views or spec.n_views, spec.orbit_radius,
                     spec.image_size, spec.image_size,
                     elevations_deg=spec.elevations_deg, frame=spec.frame,
                     azimuth_offset_deg=azimuth_offset_deg)


def sphere_scene(image_size: int = 128, n_views: int = 8) -> SceneSpec:
    return SceneSpec(
        primitives=[Primitive("sphere", center=[0.0, 0.0, 0.0], size=[0.5],
                              rgb=[0.75, 0.35, 0.25])],
        n_views=n_views, image_size=image_size)


def torus_scene(image_size: int = 128, n_views: int = 8) -> SceneSpec:
    return SceneSpec(
        primitives=[Primitive("torus", center=[0.0, 0.0, 0.0],
                              size=[0.42, 0.18], albedo_kind="gradient",
                              rgb=[0.8, 0.25, 0.2], rgb1=[0.2, 0.45, 0.85],
                              axis=0)],
        n_views=n_views, image_size=image_size)


# --------------------------------------------------------- serialization

def scene_to_dict(spec: SceneSpec) -> dict:
    prims = []
    for p in spec.primitives:
        d = {"kind": p.kind, "center": p.center.tolist(),
             "size": p.size.tolist(), "albedo_kind": p.albedo_kind,
             "rgb": p.rgb.tolist()}
        if p.rgb1 is not None:
            d["rgb1"] = p.rgb1.tolist()
            d["axis"] = int(p.axis)
        prims.append(d)
    return {
        "primitives": prims,
        "light_dir": spec.light_dir.tolist(),
        "ambient": float(spec.ambient),
        "smooth_k": float(spec.smooth_k),
        "n_views": int(spec.n_views),
        "elevations_deg": list(spec.elevations_deg),
        "orbit_radius": float(spec.orbit_radius),
        "image_size": int(spec.image_size),
        "frame": float(spec.frame),
    }


def scene_from_dict(d: dict) -> SceneSpec:
    prims = [Primitive(kind=p["kind"], center=p["center"], size=p["size"],
                       albedo_kind=p.get("albedo_kind", "constant"),
                       rgb=p.get("rgb", [0.75, 0.35, 0.25]),
                       rgb1=p.get("rgb1"), axis=p.get("axis", 0))
             for p in d["primitives"]]
    return SceneSpec(
        primitives=prims,
        light_dir=np.asarray(d.get("light_dir", [0.45, -0.35, 0.82])),
        ambient=d.get("ambient", 0.25),
        smooth_k=d.get("smooth_k", 0.0),
        n_views=d.get("n_views", 8),
        elevations_deg=tuple(d.get("elevations_deg", (-5.0, 15.0, 30.0))),
        orbit_radius=d.get("orbit_radius", 2.4),
        image_size=d.get("image_size", 128),
        frame=d.get("frame", 1.05))
