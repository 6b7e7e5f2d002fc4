"""Evaluation metrics: PSNR, SSIM, pyramid perceptual proxy, Chamfer
distance, volume IoU.

The perceptual proxy is the mean L1 distance over a 3-level Gaussian
pyramid of both images. It replaces learned perceptual metrics and is
always reported under its own name.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Var
from .extract import Mesh, triangle_areas

__all__ = ["psnr", "ssim", "pproxy", "pyramid_l1_var", "chamfer",
           "chamfer_points", "sample_surface", "volume_iou"]

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


_SSIM_RADIUS = 5  # 11x11 window
_SSIM_SIGMA = 1.5


def _ssim_kernel() -> np.ndarray:
    x = np.arange(-_SSIM_RADIUS, _SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


def _ssim_filter(img: np.ndarray) -> np.ndarray:
    k = _ssim_kernel()
    out = convolve1d(img, k, axis=0, mode="mirror")
    return convolve1d(out, k, axis=1, mode="mirror")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window, unit range."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_a = _ssim_filter(a)
    mu_b = _ssim_filter(b)
    var_a = _ssim_filter(a * a) - mu_a ** 2
    var_b = _ssim_filter(b * b) - mu_b ** 2
    cov = _ssim_filter(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ------------------------------------------------------- perceptual proxy

_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_down_axis0(img: Var) -> Var:
    """Gaussian blur + stride-2 downsample along axis 0 (clamped borders)."""
    h = img.data.shape[0]
    h2 = (h + 1) // 2
    rows = 2 * np.arange(h2)[:, None] + np.arange(-2, 3)[None, :]
    rows = np.clip(rows, 0, h - 1)
    taps = ad.gather(img, rows, axis=0)  # (h2, 5, ...)
    kshape = (1, 5) + (1,) * (img.data.ndim - 1)
    weighted = taps * ad.as_var(_PYR_KERNEL.reshape(kshape))
    return ad.vsum(weighted, axis=1)


def _blur_down(img: Var) -> Var:
    ndim = img.data.ndim
    perm = (1, 0) + tuple(range(2, ndim))
    out = _blur_down_axis0(img)
    out = ad.transpose(out, perm)
    out = _blur_down_axis0(out)
    return ad.transpose(out, perm)


def pyramid_l1_var(a: Var, b: Var, levels: int = 3) -> Var:
    """Mean L1 over a Gaussian pyramid; differentiable through `a` and `b`."""
    total = None
    for lv in range(levels):
        if lv > 0:
            a = _blur_down(a)
            b = _blur_down(b)
        term = ad.vmean(ad.absolute(a - b))
        total = term if total is None else total + term
    return total * (1.0 / levels)


def pproxy(a: np.ndarray, b: np.ndarray, levels: int = 3) -> float:
    with ad.no_grad():
        return float(pyramid_l1_var(ad.as_var(np.asarray(a, dtype=np.float64)),
                                    ad.as_var(np.asarray(b, dtype=np.float64)),
                                    levels).data)


# ------------------------------------------------------------- geometry

def sample_surface(mesh: Mesh, n_samples: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the triangle surface."""
    areas = triangle_areas(mesh)
    total = areas.sum()
    if mesh.empty or total <= 0:
        return np.zeros((0, 3))
    rng = np.random.Generator(np.random.PCG64(seed))
    probs = areas / total
    tri_ids = rng.choice(areas.size, size=n_samples, p=probs)
    tri = mesh.triangles[tri_ids]
    v0 = mesh.vertices[tri[:, 0]]
    v1 = mesh.vertices[tri[:, 1]]
    v2 = mesh.vertices[tri[:, 2]]
    r1 = np.sqrt(rng.uniform(size=(n_samples, 1)))
    r2 = rng.uniform(size=(n_samples, 1))
    return (1.0 - r1) * v0 + r1 * (1.0 - r2) * v1 + r1 * r2 * v2


def chamfer_points(pts_a: np.ndarray, pts_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    da = cKDTree(pts_b).query(pts_a)[0]
    db = cKDTree(pts_a).query(pts_b)[0]
    return 0.5 * (float(da.mean()) + float(db.mean()))


def chamfer(mesh_a: Mesh, mesh_b: Mesh, n_samples: int = 100_000,
            seed: int = 0) -> float:
    """Chamfer distance from area-weighted surface samples of both meshes."""
    pa = sample_surface(mesh_a, n_samples, seed=seed)
    pb = sample_surface(mesh_b, n_samples, seed=seed + 1)
    return chamfer_points(pa, pb)


def volume_iou(sdf_a, sdf_b, resolution: int = 128,
               bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
               chunk: int = 262144) -> float:
    """Occupancy IoU of two SDF callables on a cell-center lattice."""
    bounds = np.asarray(bounds, dtype=np.float64)
    h = (bounds[1] - bounds[0]) / resolution
    axes = [bounds[0][a] + h[a] * (np.arange(resolution) + 0.5)
            for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    inter = 0
    union = 0
    for lo in range(0, pts.shape[0], chunk):
        p = pts[lo:lo + chunk]
        occ_a = np.asarray(sdf_a(p)) < 0
        occ_b = np.asarray(sdf_b(p)) < 0
        inter += int(np.count_nonzero(occ_a & occ_b))
        union += int(np.count_nonzero(occ_a | occ_b))
    if union == 0:
        return 1.0
    return inter / union
