"""Command-line entry point.

Subcommands wire the pipeline end to end: synth -> fit -> extract/render
-> eval, plus the beta-schedule comparison experiment. Every command is
deterministic for a given --seed with --threads 1.

Precedence: config file > command-line flags > built-in defaults; the
merged configuration is snapshotted into the run directory.

Heavy imports stay inside functions so --threads can cap the BLAS pools
before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

__all__ = ["main"]


def _apply_threads(argv: list[str]) -> None:
    threads = "1"
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = threads


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="worker/BLAS thread cap; 1 is bit-reproducible")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--config", type=str, default=None,
                   help="YAML/JSON file overriding flags and defaults")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    import yaml
    text = Path(path).read_text()
    return yaml.safe_load(text) or {}


def _merged_fit_config(args) -> "object":
    from .fit import FitConfig
    cfg = FitConfig()
    flag_overrides = {
        "seed": args.seed,
        "dtype": args.precision,
    }
    for name in ("stage1_iters", "stage2_iters", "patch", "grid_res",
                 "field_res", "channels", "n_coarse", "n_fine",
                 "src_res_start", "src_res_end", "beta_mode"):
        val = getattr(args, name, None)
        if val is not None:
            flag_overrides[name] = val
    merged = {**asdict(cfg), **flag_overrides,
              **_load_config_file(args.config)}
    known = set(asdict(cfg))
    unknown = set(merged) - known
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    merged["adam_betas"] = tuple(merged["adam_betas"])
    return FitConfig(**merged)


def _load_scene(path_or_name: str):
    from . import synth
    from .io import load_scene_yaml
    if path_or_name == "sphere":
        return synth.sphere_scene()
    if path_or_name == "torus":
        return synth.torus_scene()
    return synth.scene_from_dict(load_scene_yaml(path_or_name))


def _fail(msg: str) -> None:
    raise SystemExit(f"error: {msg}")


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    from . import synth
    from .io import save_bundle, save_cameras, save_json, save_scene_yaml
    spec = _load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cams = synth.scene_cameras(spec)
    half_step = 180.0 / spec.n_views
    test_cams = synth.scene_cameras(spec, azimuth_offset_deg=half_step,
                                    n_views=args.test_views)
    for i, cam in enumerate(train_cams):
        save_bundle(out, f"train_{i:03d}", synth.render_gt(spec, cam))
    for i, cam in enumerate(test_cams):
        save_bundle(out, f"test_{i:03d}", synth.render_gt(spec, cam))
    save_cameras(out / "cameras_train.txt", train_cams)
    save_cameras(out / "cameras_test.txt", test_cams)
    save_scene_yaml(out / "scene.yaml", synth.scene_to_dict(spec))
    save_json(out / "manifest.json", {
        "n_train": len(train_cams), "n_test": len(test_cams),
        "image_size": spec.image_size})
    print(f"wrote {len(train_cams)} train / {len(test_cams)} test views "
          f"to {out}")


def _load_views(data_dir: Path, prefix: str):
    from .io import load_bundle, load_cameras
    cams = load_cameras(data_dir / f"cameras_{prefix}.txt")
    return [(cam, load_bundle(data_dir, f"{prefix}_{i:03d}"))
            for i, cam in enumerate(cams)]


def cmd_fit(args) -> None:
    import numpy as np
    from .extract import attach_colors, flexicubes_extract, marching_cubes, \
        sample_grid
    from .fit import fit_scene
    from .io import export_mesh, save_checkpoint, save_json, write_csv
    from . import autodiff as ad
    cfg = _merged_fit_config(args)
    data = Path(args.data)
    out = Path(args.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    (out / "mesh").mkdir(parents=True, exist_ok=True)
    views = _load_views(data, "train")
    snapshot = asdict(cfg)
    snapshot["adam_betas"] = list(snapshot["adam_betas"])
    save_json(out / "config.json", snapshot)

    from .field import init_field
    from .heads import init_heads
    from .density import BetaSchedule
    dtype = cfg.numpy_dtype()
    field = init_field(cfg.field_res, cfg.channels, cfg.init_scale,
                       seed=cfg.seed, dtype=dtype)
    heads = init_heads(cfg.channels, seed=cfg.seed + 1, dtype=dtype)
    sched = BetaSchedule(mode=cfg.beta_mode, beta0=cfg.beta0, beta1=cfg.beta1)

    ckpt_every = args.ckpt_every

    def callback(stage, it, value):
        if ckpt_every and it % ckpt_every == 0 and it > 0:
            save_checkpoint(out / "ckpt" / f"{stage}_{it:06d}.tsdf",
                            field, heads, sched)

    field, heads, sched, logs = fit_scene(
        views, cfg, field=field, heads=heads, sched=sched,
        callback=callback if ckpt_every else None)
    header = ["step", "beta", "loss", "lr", "psnr"]
    write_csv(out / "logs" / "stage1.csv", header, logs["stage1"])
    write_csv(out / "logs" / "stage2.csv", header, logs["stage2"])
    save_checkpoint(out / "ckpt" / "final.tsdf", field, heads, sched)
    with ad.no_grad():
        grid = sample_grid(field, heads, cfg.grid_res, field.bounds)
        mesh_mc = attach_colors(marching_cubes(grid), field, heads)
        mesh_fx = attach_colors(flexicubes_extract(grid), field, heads)
    if not mesh_mc.empty:
        export_mesh(out / "mesh" / "final_mc.obj", mesh_mc)
    if not mesh_fx.empty:
        export_mesh(out / "mesh" / "final_flexi.obj", mesh_fx)
    last = logs["stage2"][-1] if logs["stage2"] else (
        logs["stage1"][-1] if logs["stage1"] else None)
    if last:
        print(f"fit complete; final loss {last[2]:.6g}")
    else:
        print("fit complete")


def cmd_extract(args) -> None:
    from . import autodiff as ad
    from .extract import attach_colors, flexicubes_extract, marching_cubes, \
        sample_grid
    from .io import export_mesh, load_checkpoint
    field, heads, sched = load_checkpoint(args.checkpoint)
    if heads is None:
        _fail("checkpoint lacks decoder heads")
    with ad.no_grad():
        grid = sample_grid(field, heads, args.resolution, field.bounds)
        mesh = marching_cubes(grid) if args.mode == "mc" \
            else flexicubes_extract(grid)
        attach_colors(mesh, field, heads)
    if mesh.empty:
        _fail("no surface crossed the extraction grid")
    export_mesh(args.out, mesh)
    print(f"wrote {mesh.vertices.shape[0]} vertices / "
          f"{mesh.triangles.shape[0]} triangles to {args.out}")


def cmd_render(args) -> None:
    from . import autodiff as ad
    from .extract import flexicubes_extract, sample_grid
    from .io import load_cameras, load_checkpoint, save_bundle
    from .meshren import raycast_view
    from .volren import RenderConfig, render_view
    field, heads, sched = load_checkpoint(args.checkpoint)
    if heads is None or sched is None:
        _fail("checkpoint lacks heads or beta state")
    cams = load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rcfg = RenderConfig(n_coarse=args.n_coarse, n_fine=args.n_fine)
    mesh = None
    if args.mode == "mesh":
        with ad.no_grad():
            grid = sample_grid(field, heads, args.resolution, field.bounds)
            mesh = flexicubes_extract(grid)
        if mesh.empty:
            _fail("no surface to render in mesh mode")
    for i, cam in enumerate(cams):
        if args.mode == "volume":
            bundle = render_view(field, heads, sched, cam, cfg=rcfg,
                                 seed=args.seed)
        else:
            bundle = raycast_view(mesh, field, heads, cam)
        save_bundle(out, f"render_{i:03d}", bundle)
    print(f"rendered {len(cams)} views to {out}")


def cmd_eval(args) -> None:
    import numpy as np
    from .io import load_bundle, load_checkpoint, load_obj, load_scene_yaml
    from .metrics import chamfer_points, psnr, pproxy, sample_surface, ssim, \
        volume_iou
    from .extract import Mesh, marching_cubes_values
    from . import synth
    lines: list[str] = []
    pred_dir = Path(args.pred) if args.pred else None
    gt_dir = Path(args.gt) if args.gt else None
    if pred_dir and gt_dir:
        names = sorted(p.name[:-8] for p in pred_dir.glob("*_rgb.png"))
        vals = {"psnr": [], "ssim": [], "pproxy": [], "mask_iou": [],
                "depth_mae": []}
        for name in names:
            gt_name = args.gt_prefix + name.split("_", 1)[1] \
                if args.gt_prefix else name
            try:
                pb = load_bundle(pred_dir, name)
                gb = load_bundle(gt_dir, gt_name)
            except FileNotFoundError:
                continue
            vals["psnr"].append(psnr(pb.rgb, gb.rgb))
            vals["ssim"].append(ssim(pb.rgb, gb.rgb))
            vals["pproxy"].append(pproxy(pb.rgb, gb.rgb))
            inter = np.sum((pb.mask >= 0.5) & (gb.mask >= 0.5))
            union = np.sum((pb.mask >= 0.5) | (gb.mask >= 0.5))
            vals["mask_iou"].append(inter / union if union else 1.0)
            joint = (pb.mask >= 0.5) & (gb.mask >= 0.5)
            if np.any(joint):
                vals["depth_mae"].append(
                    float(np.mean(np.abs(pb.depth[joint] - gb.depth[joint]))))
        for key, arr in vals.items():
            if arr:
                lines.append(f"{key}: {float(np.mean(arr)):.6g}")
        lines.append(f"n_views: {len(vals['psnr'])}")
    if args.mesh and args.scene:
        spec = _load_scene(args.scene)
        verts, faces, _ = load_obj(args.mesh)
        mesh = Mesh(verts, faces)
        m = args.iou_resolution
        ax = np.linspace(-1, 1, m)
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        vals3 = synth.scene_sdf(spec, pts).reshape(m, m, m)
        ref = marching_cubes_values(vals3, [[-1, -1, -1], [1, 1, 1]])
        samples_pred = sample_surface(mesh, args.samples, seed=args.seed)
        samples_ref = sample_surface(ref, args.samples, seed=args.seed + 1)
        lines.append(f"chamfer: {chamfer_points(samples_pred, samples_ref):.6g}")
    if args.checkpoint and args.scene:
        from . import autodiff as ad
        from .field import query_batch
        from .heads import decode_sdf
        spec = _load_scene(args.scene)
        field, heads, _ = load_checkpoint(args.checkpoint)

        def fitted_sdf(p):
            with ad.no_grad():
                feat = query_batch(field, p)
                return decode_sdf(heads, feat,
                                  p.astype(feat.data.dtype)).data

        iou = volume_iou(fitted_sdf, lambda p: synth.scene_sdf(spec, p),
                         resolution=args.iou_resolution)
        lines.append(f"volume_iou: {iou:.6g}")
    if not lines:
        _fail("nothing to evaluate; pass --pred/--gt or --mesh/--scene")
    report = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report)
    print(report, end="")


def cmd_beta_experiment(args) -> None:
    from dataclasses import replace
    import numpy as np
    from . import synth
    from .fit import FitConfig, fit_scene
    from .io import save_json, write_csv
    spec = _load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = _merged_fit_config(args)
    base = replace(base, stage2_iters=0)
    cams = synth.scene_cameras(spec)
    views = [(cam, synth.render_gt(spec, cam)) for cam in cams]
    runs = {
        "fixed": replace(base, beta_mode="fixed", beta0=0.1),
        "fixed_small": replace(base, beta_mode="fixed", beta0=0.003),
        "linear": replace(base, beta_mode="linear", beta0=0.1, beta1=0.001),
        "adaptive": replace(base, beta_mode="adaptive", beta0=0.1),
    }
    summary = {}
    tail = max(1, base.stage1_iters // 10)
    for name, cfg in runs.items():
        _, _, sched, logs = fit_scene(views, cfg)
        rows = logs["stage1"]
        write_csv(out / f"beta_{name}.csv", ["step", "beta", "loss", "lr",
                                             "psnr"], rows)
        losses = [r[2] for r in rows]
        summary[name] = {
            "final_loss": losses[-1],
            "tail_mean_loss": float(np.mean(losses[-tail:])),
            "beta_start": rows[0][1],
            "beta_end": rows[-1][1],
        }
        print(f"{name}: tail loss {summary[name]['tail_mean_loss']:.6g}, "
              f"beta {rows[0][1]:.4g} -> {rows[-1][1]:.4g}")
    save_json(out / "summary.json", summary)


# ------------------------------------------------------------------ parser

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sdfit",
        description="tensorial SDF scene fitting and mesh extraction")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render ground-truth bundles")
    p.add_argument("--scene", required=True,
                   help="scene YAML path, or builtin: sphere | torus")
    p.add_argument("--out", required=True)
    p.add_argument("--test-views", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a scene from a synth directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt-every", type=int, default=0)
    for name, typ in (("stage1-iters", int), ("stage2-iters", int),
                      ("patch", int), ("grid-res", int), ("field-res", int),
                      ("channels", int), ("n-coarse", int), ("n-fine", int),
                      ("src-res-start", int), ("src-res-end", int)):
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--beta-mode", choices=("fixed", "linear", "adaptive"),
                   default=None)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", help="extract a textured mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("mc", "flexi"), default="mc")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("render", help="render novel views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("volume", "mesh"), default="volume")
    p.add_argument("--resolution", type=int, default=64,
                   help="extraction grid for mesh mode")
    p.add_argument("--n-coarse", type=int, default=64)
    p.add_argument("--n-fine", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics report")
    p.add_argument("--pred", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--gt-prefix", default=None,
                   help="match pred names against this gt prefix")
    p.add_argument("--mesh", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scene", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--iou-resolution", type=int, default=128)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("beta-experiment",
                       help="compare beta schedules with a shared seed")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    for name, typ in (("stage1-iters", int), ("patch", int),
                      ("field-res", int), ("channels", int),
                      ("n-coarse", int), ("n-fine", int),
                      ("src-res-start", int), ("src-res-end", int)):
        p.add_argument(f"--{name}", type=typ, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_beta_experiment)
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
