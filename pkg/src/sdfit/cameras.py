"""Pinhole cameras: world-to-camera extrinsics, pixel rays, projection.

Conventions: OpenCV-style camera frame (+x right, +y down, +z forward),
image row 0 at the top, rays pass through pixel centers (px + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Camera", "make_rays", "rays_for_rect", "project", "orbit_camera",
           "orbit_rig"]


@dataclass
class Camera:
    extrinsic: np.ndarray  # 4x4 world-to-camera rigid transform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.extrinsic.shape != (4, 4):
            raise ValueError("extrinsic must be 4x4")
        r = self.extrinsic[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("extrinsic rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def scaled(self, width: int, height: int) -> "Camera":
        """Same view at a different pixel resolution."""
        sx = width / self.width
        sy = height / self.height
        return Camera(self.extrinsic.copy(),
                      fx=self.fx * sx, fy=self.fy * sy,
                      cx=(self.cx + 0.5) * sx - 0.5,
                      cy=(self.cy + 0.5) * sy - 0.5,
                      width=width, height=height)


def make_rays(camera: Camera, pixels: np.ndarray):
    """Unit-direction world rays through pixel centers.

    `pixels` is an (N, 2) integer array of (x, y); returns (origins, dirs).
    """
    pixels = np.atleast_2d(np.asarray(pixels))
    if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] >= camera.width) or \
       np.any(pixels[:, 1] < 0) or np.any(pixels[:, 1] >= camera.height):
        raise ValueError("pixels outside the image")
    x = (pixels[:, 0] + 0.5 - (camera.cx + 0.5)) / camera.fx
    y = (pixels[:, 1] + 0.5 - (camera.cy + 0.5)) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_world = d_cam @ camera.rotation  # == (R^T @ d)^T per ray
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def rays_for_rect(camera: Camera, x0: int, y0: int, w: int, h: int):
    """Rays for a pixel rectangle, row-major, plus the pixel array."""
    xs, ys = np.meshgrid(np.arange(x0, x0 + w), np.arange(y0, y0 + h))
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
    origins, dirs = make_rays(camera, pixels)
    return origins, dirs, pixels


def project(camera: Camera, points: np.ndarray) -> np.ndarray:
    """World points -> continuous pixel coordinates (center convention)."""
    points = np.atleast_2d(points)
    cam = points @ camera.rotation.T + camera.translation
    x = cam[:, 0] / cam[:, 2] * camera.fx + camera.cx
    y = cam[:, 1] / cam[:, 2] * camera.fy + camera.cy
    return np.stack([x, y], axis=1)


def orbit_camera(azimuth_deg: float, elevation_deg: float, radius: float,
                 width: int, height: int, frame: float = 1.05) -> Camera:
    """Camera on an orbit looking at the origin (world +z up).

    `frame` is the world half-extent at the origin that maps to the image
    half-width.
    """
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = radius * np.array([np.cos(el) * np.cos(az),
                             np.cos(el) * np.sin(az),
                             np.sin(el)])
    fwd = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down
        right = np.array([1.0, 0.0, 0.0])
        nr = 1.0
    right = right / nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)  # world-to-camera rows
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    f = 0.5 * width * radius / frame
    return Camera(ext, fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height)


def orbit_rig(n_views: int, radius: float, width: int, height: int,
              elevations_deg=(-5.0, 15.0, 30.0), frame: float = 1.05,
              azimuth_offset_deg: float = 0.0) -> list[Camera]:
    """Evenly spaced azimuths, cycling through the elevation list."""
    cams = []
    for i in range(n_views):
        az = azimuth_offset_deg + 360.0 * i / n_views
        el = elevations_deg[i % len(elevations_deg)]
        cams.append(orbit_camera(az, el, radius, width, height, frame))
    return cams
