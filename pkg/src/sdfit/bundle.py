"""Per-view render bundle: rgb, albedo, mask, depth rasters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RenderBundle"]


@dataclass
class RenderBundle:
    """Channels are (H, W[, 3]) numpy arrays, or tape Vars during fitting."""

    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    albedo: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray    # (H, W) in [0, 1]
    depth: np.ndarray   # (H, W) world units, 0 where mask < 0.5

    def __post_init__(self):
        for name in ("rgb", "albedo", "mask", "depth"):
            val = getattr(self, name)
            if not hasattr(val, "data"):  # leave tape Vars alone
                setattr(self, name, np.asarray(val))

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def validate(self) -> None:
        for name in ("rgb", "albedo", "mask", "depth"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if self.mask.min() < -1e-6 or self.mask.max() > 1.0 + 1e-6:
            raise ValueError("mask outside [0, 1]")

    def crop(self, x0: int, y0: int, w: int, h: int) -> "RenderBundle":
        return RenderBundle(
            rgb=self.rgb[y0:y0 + h, x0:x0 + w],
            albedo=self.albedo[y0:y0 + h, x0:x0 + w],
            mask=self.mask[y0:y0 + h, x0:x0 + w],
            depth=self.depth[y0:y0 + h, x0:x0 + w])
