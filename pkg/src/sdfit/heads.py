"""MLP decoder heads: feature + position -> SDF / colors / deformation / weights.

Head widths follow the two-stage pipeline: 4-layer MLPs (hidden 64) for the
SDF and color heads, 2-layer MLPs for the deformation and extraction-weight
heads. Inputs are the field feature concatenated with the raw position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

__all__ = [
    "MLP", "HeadSet", "init_heads",
    "decode_sdf", "decode_color", "compose_color", "decode_deform",
    "decode_weights",
]


@dataclass
class MLP:
    weights: list[Var]  # (fan_in, fan_out) so forward is x @ W + b
    biases: list[Var]
    hidden_act: str  # "relu" or "softplus"

    def params(self) -> list[Var]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass
class HeadSet:
    sdf: MLP
    color: MLP
    deform: MLP
    weight: MLP
    feature_dim: int  # 3 * channels

    @property
    def input_dim(self) -> int:
        return self.feature_dim + 3

    def params(self) -> list[Var]:
        return (self.sdf.params() + self.color.params()
                + self.deform.params() + self.weight.params())

    def mlps(self) -> list[MLP]:
        return [self.sdf, self.color, self.deform, self.weight]


def _init_mlp(rng: np.random.Generator, sizes: list[int], hidden_act: str,
              dtype) -> MLP:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        k = 1.0 / np.sqrt(fan_in)
        weights.append(Var(rng.uniform(-k, k, (fan_in, fan_out)).astype(dtype),
                           requires=True))
        biases.append(Var(rng.uniform(-k, k, fan_out).astype(dtype),
                          requires=True))
    return MLP(weights, biases, hidden_act)


def init_heads(channels: int = 40, seed: int = 0, dtype=np.float32,
               sdf_bias: float = 0.3) -> HeadSet:
    """Seeded uniform fan-in init; the SDF output bias starts at `sdf_bias`
    so the initial field is a mild uniform fog instead of hard emptiness."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = 3 * channels + 3
    sdf = _init_mlp(rng, [d, 64, 64, 64, 1], "softplus", dtype)
    color = _init_mlp(rng, [d, 64, 64, 64, 6], "relu", dtype)
    deform = _init_mlp(rng, [d, 64, 1], "relu", dtype)
    weight = _init_mlp(rng, [d, 64, 8], "relu", dtype)
    sdf.biases[-1].data[:] = sdf_bias
    return HeadSet(sdf=sdf, color=color, deform=deform, weight=weight,
                   feature_dim=3 * channels)


def mlp_forward(mlp: MLP, x: Var) -> Var:
    act = ad.relu if mlp.hidden_act == "relu" else ad.softplus
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i != last:
            h = act(h)
    return h


def _head_input(heads: HeadSet, feature, p) -> tuple[Var, bool]:
    """Stack feature and position into the (P, 3R+3) head input."""
    f = ad.as_var(feature)
    pv = ad.as_var(p)
    single = f.data.ndim == 1
    if single:
        f = ad.reshape(f, (1, -1))
    if pv.data.ndim == 1:
        pv = ad.reshape(pv, (1, 3))
    if f.data.shape[1] != heads.feature_dim:
        raise ValueError(
            f"feature dim {f.data.shape[1]} != expected {heads.feature_dim}")
    if pv.data.dtype != f.data.dtype:
        pv = Var(pv.data.astype(f.data.dtype), requires=False) \
            if not pv.requires else pv
    return ad.concat([f, pv], axis=1), single


def decode_sdf(heads: HeadSet, feature, p) -> Var:
    """Signed distance at p; unbounded, shape (P,) for batched input."""
    x, single = _head_input(heads, feature, p)
    s = mlp_forward(heads.sdf, x)
    if single:
        return ad.reshape(s, ())
    return ad.reshape(s, (-1,))


def decode_color(heads: HeadSet, feature, p) -> tuple[Var, Var]:
    """(albedo, shading), both sigmoid-squashed into [0,1]^3."""
    x, single = _head_input(heads, feature, p)
    c = ad.sigmoid(mlp_forward(heads.color, x))
    c_a = c[:, 0:3]
    c_r = c[:, 3:6]
    if single:
        return ad.reshape(c_a, (3,)), ad.reshape(c_r, (3,))
    return c_a, c_r


def compose_color(c_a, c_r) -> Var:
    """Final color c = albedo * shading, elementwise."""
    return ad.mul(ad.as_var(c_a), ad.as_var(c_r))


def decode_deform(heads: HeadSet, feature, p, cell_size: float) -> Var:
    """Node deformation, squashed into (-cell_size/2, cell_size/2)."""
    x, single = _head_input(heads, feature, p)
    d = ad.mul(ad.tanh(mlp_forward(heads.deform, x)), ad.as_var(0.5 * cell_size))
    if single:
        return ad.reshape(d, ())
    return ad.reshape(d, (-1,))


def decode_weights(heads: HeadSet, feature, p) -> Var:
    """8 strictly positive extraction weights per query (softplus squashed)."""
    x, single = _head_input(heads, feature, p)
    w = ad.softplus(mlp_forward(heads.weight, x))
    if single:
        return ad.reshape(w, (8,))
    return w
