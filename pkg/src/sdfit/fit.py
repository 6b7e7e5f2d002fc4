"""Per-scene two-stage fitting.

Stage 1 samples random foreground-biased patches at a progressively
increasing source resolution and optimizes field, heads, and (adaptive)
beta through the volume renderer. Stage 2 freezes the render path onto
the extracted dual mesh: grid decode -> differentiable extraction ->
ray-cast render -> image + depth + regularizer loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .bundle import RenderBundle
from .cameras import Camera
from .density import BetaSchedule, schedule_beta
from .extract import flexicubes_extract, reg_loss, sample_grid
from .field import TensorField, init_field
from .heads import HeadSet, init_heads
from .meshren import raycast_rays
from .metrics import pyramid_l1_var
from .optim import Adam, cosine_lr
from .volren import RenderConfig, render_rays
from .cameras import rays_for_rect

__all__ = ["FitConfig", "FitDivergence", "loss_stage1", "loss_stage2",
           "fit_scene", "resize_bilinear", "resize_bundle"]


class FitDivergence(RuntimeError):
    pass


@dataclass
class FitConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 500
    lr: float = 4e-4
    lr_stage2: float = 1e-5
    adam_betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.05
    lambda_vgg: float = 2.0
    lambda_d: float = 0.5
    lambda_reg: float = 0.005
    patch: int = 128
    src_res_start: int = 192
    src_res_end: int = 512
    fg_bias: float = 0.8
    seed: int = 0
    # representation
    field_res: int = 64
    channels: int = 40
    init_scale: float = 0.1
    dtype: str = "f32"
    # rendering
    n_coarse: int = 64
    n_fine: int = 64
    chunk: int = 4096
    # beta
    beta_mode: str = "adaptive"
    beta0: float = 0.1
    beta1: float = 0.001
    lr_beta_mult: float = 1.0
    # stage 2
    grid_res: int = 64
    log_every: int = 1

    def numpy_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    def render_config(self) -> RenderConfig:
        return RenderConfig(n_coarse=self.n_coarse, n_fine=self.n_fine,
                            chunk=self.chunk)


# ------------------------------------------------------------------ losses

def _mse(a, b) -> Var:
    d = ad.sub(ad.as_var(a), ad.as_var(b))
    return ad.vmean(d * d)


def loss_stage1(pred: RenderBundle, gt: RenderBundle,
                lambda_vgg: float = 2.0) -> Var:
    """MSE over rgb, albedo, and mask plus the pyramid perceptual proxy."""
    total = _mse(pred.rgb, gt.rgb) + _mse(pred.albedo, gt.albedo) \
        + _mse(pred.mask, gt.mask)
    if lambda_vgg > 0.0:
        gt_rgb = ad.as_var(np.asarray(gt.rgb, dtype=np.float64))
        total = total + lambda_vgg * pyramid_l1_var(ad.as_var(pred.rgb),
                                                    gt_rgb)
    return total


def loss_stage2(pred: RenderBundle, gt: RenderBundle, l_reg: Var,
                cfg: FitConfig) -> Var:
    """Stage-1 terms plus masked depth L1 and the extraction regularizer.

    The rendered mask has no gradient (coverage is non-differentiable);
    its MSE still contributes to the value. Depth L1 averages over pixels
    where both masks are at least 0.5.
    """
    total = loss_stage1(pred, gt, cfg.lambda_vgg)
    pred_mask = pred.mask.data if isinstance(pred.mask, Var) else pred.mask
    joint = (np.asarray(pred_mask) >= 0.5) & (np.asarray(gt.mask) >= 0.5)
    if np.any(joint):
        dp = ad.as_var(pred.depth)[joint]
        dg = np.asarray(gt.depth)[joint]
        total = total + cfg.lambda_d * ad.vmean(ad.absolute(dp - ad.as_var(dg)))
    return total + cfg.lambda_reg * l_reg


# ------------------------------------------------------------------ images

def resize_bilinear(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Pixel-center aligned bilinear resize (plain numpy, ground truth only)."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bundle(bundle: RenderBundle, size: int) -> RenderBundle:
    if size == bundle.height and size == bundle.width:
        return bundle
    return RenderBundle(
        rgb=resize_bilinear(bundle.rgb, size, size),
        albedo=resize_bilinear(bundle.albedo, size, size),
        mask=resize_bilinear(bundle.mask, size, size),
        depth=resize_bilinear(bundle.depth, size, size))


# ------------------------------------------------------------- patch logic

def _patch_rect(rng: np.random.Generator, gt: RenderBundle, size: int,
                fg_bias: float) -> tuple[int, int, int, int]:
    h, w = gt.mask.shape
    size = min(size, h, w)
    fg = np.argwhere(gt.mask >= 0.5)
    if fg.shape[0] > 0 and rng.uniform() < fg_bias:
        cy, cx = fg[rng.integers(fg.shape[0])]
    else:
        cy = rng.integers(h)
        cx = rng.integers(w)
    x0 = int(np.clip(cx - size // 2, 0, w - size))
    y0 = int(np.clip(cy - size // 2, 0, h - size))
    return x0, y0, size, size


def _assemble_images(out, hit: np.ndarray, h: int, w: int):
    """Scatter per-ray render outputs into (h, w) image Vars."""
    n = h * w
    hidx = np.nonzero(hit)[0]
    if out is None:
        zero3 = Var(np.zeros((h, w, 3)))
        zero1 = Var(np.zeros((h, w)))
        return zero3, zero3, zero1, zero1
    rgb = ad.reshape(ad.scatter_rows(out[0], hidx, n), (h, w, 3))
    albedo = ad.reshape(ad.scatter_rows(out[1], hidx, n), (h, w, 3))
    mask = ad.reshape(ad.scatter_rows(ad.reshape(out[2], (-1, 1)), hidx, n),
                      (h, w))
    depth = ad.reshape(ad.scatter_rows(ad.reshape(out[3], (-1, 1)), hidx, n),
                       (h, w))
    return rgb, albedo, mask, depth


def _stage1_step(field, heads, sched, camera: Camera, gt: RenderBundle,
                 rect, rcfg: RenderConfig, lambda_vgg: float, seed: int,
                 adaptive: bool, beta_value: float):
    """Render a patch, compute the stage-1 loss, and backprop.

    Patches larger than one ray chunk use a two-pass checkpoint scheme:
    a no-grad forward renders pixels, the image loss is differentiated
    down to per-pixel gradients, then each chunk is re-rendered on its
    own tape and seeded with those gradients.
    """
    x0, y0, w, h = rect
    origins, dirs, pixels = rays_for_rect(camera, x0, y0, w, h)
    gt_crop = gt.crop(x0, y0, w, h)
    n = origins.shape[0]

    if n <= rcfg.chunk:
        with ad.Tape() as tape:
            beta_var = None if adaptive else ad.as_var(beta_value)
            out, hit = render_rays(field, heads, sched, origins, dirs, rcfg,
                                   seed, pixels=pixels, beta_var=beta_var)
            rgb, albedo, mask, _ = _assemble_images(out, hit, h, w)
            pred = RenderBundle(rgb=rgb, albedo=albedo, mask=mask,
                                depth=np.zeros((h, w)))
            loss = loss_stage1(pred, gt_crop, lambda_vgg)
            value = float(loss.data)
            mse_rgb = float(np.mean((rgb.data - gt_crop.rgb) ** 2))
            if math.isfinite(value):
                tape.backward(loss)
        return value, mse_rgb

    # two-pass: forward without tape, image-space grads, chunked re-render
    rgb_a = np.zeros((n, 3))
    alb_a = np.zeros((n, 3))
    msk_a = np.zeros(n)
    with ad.no_grad():
        for lo in range(0, n, rcfg.chunk):
            hi = min(lo + rcfg.chunk, n)
            out, hit = render_rays(field, heads, sched, origins[lo:hi],
                                   dirs[lo:hi], rcfg, seed,
                                   pixels=pixels[lo:hi])
            if out is None:
                continue
            idx = np.nonzero(hit)[0] + lo
            rgb_a[idx] = out[0].data
            alb_a[idx] = out[1].data
            msk_a[idx] = out[2].data
    rgb_leaf = Var(rgb_a.reshape(h, w, 3), requires=True)
    alb_leaf = Var(alb_a.reshape(h, w, 3), requires=True)
    msk_leaf = Var(msk_a.reshape(h, w), requires=True)
    with ad.Tape() as tape:
        pred = RenderBundle(rgb=rgb_leaf, albedo=alb_leaf, mask=msk_leaf,
                            depth=np.zeros((h, w)))
        loss = loss_stage1(pred, gt_crop, lambda_vgg)
        value = float(loss.data)
        mse_rgb = float(np.mean((rgb_a.reshape(h, w, 3) - gt_crop.rgb) ** 2))
        if not math.isfinite(value):
            return value, mse_rgb
        tape.backward(loss)
    g_rgb = rgb_leaf.grad.reshape(n, 3)
    g_alb = alb_leaf.grad.reshape(n, 3)
    g_msk = msk_leaf.grad.reshape(n)
    for lo in range(0, n, rcfg.chunk):
        hi = min(lo + rcfg.chunk, n)
        with ad.Tape() as tape:
            beta_var = None if adaptive else ad.as_var(beta_value)
            out, hit = render_rays(field, heads, sched, origins[lo:hi],
                                   dirs[lo:hi], rcfg, seed,
                                   pixels=pixels[lo:hi], beta_var=beta_var)
            if out is None:
                continue
            idx = np.nonzero(hit)[0] + lo
            pseudo = ad.vsum(out[0] * ad.as_var(g_rgb[idx])) \
                + ad.vsum(out[1] * ad.as_var(g_alb[idx])) \
                + ad.vsum(out[2] * ad.as_var(g_msk[idx]))
            tape.backward(pseudo)
    return value, mse_rgb


# -------------------------------------------------------------------- fit

def fit_scene(views: list[tuple[Camera, RenderBundle]], cfg: FitConfig,
              field: TensorField | None = None, heads: HeadSet | None = None,
              sched: BetaSchedule | None = None, callback=None):
    """Two-stage fit; returns (field, heads, sched, logs).

    `views` are training views only; held-out evaluation is the caller's
    business. `logs` maps stage names to rows of
    (step, beta, loss, lr, psnr).
    """
    if len(views) < 1:
        raise ValueError("need at least one view")
    dtype = cfg.numpy_dtype()
    if field is None:
        field = init_field(cfg.field_res, cfg.channels, cfg.init_scale,
                           seed=cfg.seed, dtype=dtype)
    if heads is None:
        heads = init_heads(cfg.channels, seed=cfg.seed + 1, dtype=dtype)
    if sched is None:
        sched = BetaSchedule(mode=cfg.beta_mode, beta0=cfg.beta0,
                             beta1=cfg.beta1)
    params = field.params() + heads.params() + sched.params()
    no_decay = {id(p) for p in sched.params()}
    lr_mult = {id(p): cfg.lr_beta_mult for p in sched.params()}
    opt = Adam(params, lr=cfg.lr, betas=cfg.adam_betas,
               weight_decay=cfg.weight_decay, no_decay=no_decay,
               lr_mult=lr_mult)
    rcfg = cfg.render_config()
    logs: dict[str, list] = {"stage1": [], "stage2": []}

    consecutive_skips = 0
    for it in range(cfg.stage1_iters):
        t = it / max(cfg.stage1_iters - 1, 1)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, 1, it])))
        view_idx = int(rng.integers(len(views)))
        camera, gt = views[view_idx]
        src = int(round(cfg.src_res_start
                        + (cfg.src_res_end - cfg.src_res_start) * t))
        src = min(src, gt.height)
        gt_s = resize_bundle(gt, src)
        cam_s = camera.scaled(src, src) if src != camera.width else camera
        rect = _patch_rect(rng, gt_s, cfg.patch, cfg.fg_bias)
        beta_value = schedule_beta(sched, t)
        it_seed = (cfg.seed * 1_000_003 + it) & 0x7FFFFFFFFFFF
        opt.zero_grad()
        value, mse_rgb = _stage1_step(
            field, heads, sched, cam_s, gt_s, rect, rcfg, cfg.lambda_vgg,
            it_seed, sched.mode == "adaptive", beta_value)
        lr_t = cosine_lr(cfg.lr, it, cfg.stage1_iters)
        if not math.isfinite(value):
            consecutive_skips += 1
            if consecutive_skips > 50:
                raise FitDivergence(
                    f"stage 1 diverged at iteration {it}: "
                    f"{consecutive_skips} consecutive non-finite losses")
            continue
        stepped = opt.step(lr=lr_t)
        consecutive_skips = 0 if stepped else consecutive_skips + 1
        if consecutive_skips > 50:
            raise FitDivergence(f"stage 1: gradients non-finite at {it}")
        sched.clamp_()
        psnr_val = 99.0 if mse_rgb <= 0 else min(
            99.0, 10.0 * math.log10(1.0 / mse_rgb))
        if it % cfg.log_every == 0 or it == cfg.stage1_iters - 1:
            logs["stage1"].append((it, sched.beta if sched.mode != "linear"
                                   else beta_value, value, lr_t, psnr_val))
        if callback is not None:
            callback("stage1", it, value)

    consecutive_skips = 0
    for it in range(cfg.stage2_iters):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, 2, it])))
        view_idx = int(rng.integers(len(views)))
        camera, gt = views[view_idx]
        opt.zero_grad()
        with ad.Tape() as tape:
            grid = sample_grid(field, heads, cfg.grid_res, field.bounds)
            mesh = flexicubes_extract(grid)
            if mesh.empty:
                consecutive_skips += 1
                if consecutive_skips > 50:
                    raise FitDivergence("stage 2: extraction stayed empty")
                continue
            origins, dirs, _ = rays_for_rect(camera, 0, 0, camera.width,
                                             camera.height)
            rgb, albedo, mask, depth, hit = raycast_rays(
                mesh, field, heads, origins, dirs)
            h, w = camera.height, camera.width
            pred = RenderBundle(
                rgb=ad.reshape(rgb, (h, w, 3)),
                albedo=ad.reshape(albedo, (h, w, 3)),
                mask=mask.reshape(h, w),
                depth=ad.reshape(depth, (h, w)))
            l_reg = reg_loss(grid, mesh)
            loss = loss_stage2(pred, gt, l_reg, cfg)
            value = float(loss.data)
            mse_rgb = float(np.mean((pred.rgb.data - gt.rgb) ** 2))
            if math.isfinite(value):
                tape.backward(loss)
        lr_t = cosine_lr(cfg.lr_stage2, it, cfg.stage2_iters)
        if not math.isfinite(value):
            consecutive_skips += 1
            if consecutive_skips > 50:
                raise FitDivergence(f"stage 2 diverged at iteration {it}")
            continue
        stepped = opt.step(lr=lr_t)
        consecutive_skips = 0 if stepped else consecutive_skips + 1
        if consecutive_skips > 50:
            raise FitDivergence(f"stage 2: gradients non-finite at {it}")
        sched.clamp_()
        psnr_val = 99.0 if mse_rgb <= 0 else min(
            99.0, 10.0 * math.log10(1.0 / mse_rgb))
        if it % cfg.log_every == 0 or it == cfg.stage2_iters - 1:
            logs["stage2"].append((it, sched.beta, value, lr_t, psnr_val))
        if callback is not None:
            callback("stage2", it, value)
    return field, heads, sched, logs
