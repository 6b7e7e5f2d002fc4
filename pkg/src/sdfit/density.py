"""SDF-to-density conversion and the beta sharpness schedules.

The conversion is the Laplace-CDF style map

    sigma = (1/beta) * (1 - 0.5*exp(s/beta))   if s < 0
    sigma = (1/(2*beta)) * exp(-s/beta)        if s >= 0

Beta can be held fixed, decayed by the reciprocal-linear schedule, or made
a learnable parameter (stored as log beta so it stays positive).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

__all__ = [
    "BETA_MIN", "LINEAR_BETA1_STAGES", "BetaSchedule",
    "sdf_to_density", "schedule_beta",
]

BETA_MIN = 1e-4
# per-stage linear targets used by the (rejected) hand schedule
LINEAR_BETA1_STAGES = (0.015, 0.003, 0.001)


@dataclass
class BetaSchedule:
    mode: str = "adaptive"  # "fixed" | "linear" | "adaptive"
    beta0: float = 0.1
    beta1: float = 0.001
    log_beta: Var = dc_field(default=None)  # leaf parameter in adaptive mode

    def __post_init__(self):
        if self.mode not in ("fixed", "linear", "adaptive"):
            raise ValueError(f"unknown beta mode {self.mode!r}")
        if self.beta0 <= 0 or self.beta1 <= 0:
            raise ValueError("beta endpoints must be positive")
        if self.mode == "adaptive" and self.log_beta is None:
            self.log_beta = Var(np.float64(math.log(self.beta0)), requires=True)

    @property
    def learnable(self) -> bool:
        return self.mode == "adaptive"

    @property
    def beta(self) -> float:
        if self.mode == "adaptive":
            return float(np.exp(self.log_beta.data))
        return self.beta0

    def beta_var(self) -> Var:
        """Current beta as a tape value (adaptive flows gradients)."""
        if self.mode == "adaptive":
            return ad.exp(self.log_beta)
        return ad.as_var(self.beta0)

    def params(self) -> list[Var]:
        return [self.log_beta] if self.mode == "adaptive" else []

    def clamp_(self) -> None:
        """Keep beta above BETA_MIN after an optimizer step."""
        if self.mode == "adaptive":
            self.log_beta.data = np.maximum(self.log_beta.data,
                                            math.log(BETA_MIN))

    def set_dtype(self, dtype) -> None:
        if self.mode == "adaptive":
            self.log_beta.data = self.log_beta.data.astype(dtype)


def sdf_to_density(s, beta) -> Var:
    """Density from signed distance under sharpness beta (Eq.-style map)."""
    if not isinstance(beta, Var):
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}")
        beta = ad.as_var(float(beta))
    elif np.any(beta.data <= 0):
        raise ValueError("beta must be positive")
    s = ad.as_var(s)
    neg_part = ad.minimum(s, ad.as_var(0.0))  # exponent kept <= 0 both ways
    pos_part = ad.maximum(s, ad.as_var(0.0))
    inv_b = ad.div(ad.as_var(1.0), beta)
    inside = ad.mul(inv_b, 1.0 - 0.5 * ad.exp(ad.mul(neg_part, inv_b)))
    outside = ad.mul(0.5 * inv_b, ad.exp(ad.neg(ad.mul(pos_part, inv_b))))
    return ad.where_mask(s.data < 0.0, inside, outside)


def schedule_beta(sched: BetaSchedule, t: float) -> float:
    """Beta at training progress t in [0, 1] (clamped with a warning)."""
    if t < 0.0 or t > 1.0:
        warnings.warn(f"training progress {t} outside [0, 1]; clamping")
        t = min(max(t, 0.0), 1.0)
    if sched.mode == "fixed":
        return sched.beta0
    if sched.mode == "linear":
        b0, b1 = sched.beta0, sched.beta1
        return b0 / (1.0 + ((b0 - b1) / b1) * t)
    return sched.beta
