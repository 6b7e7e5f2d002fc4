"""File formats.

* Checkpoint: magic "TSDF1", little-endian uint32 N and R, the three
  vector factors (X, Y, Z) then the three matrix factors (YZ, ZX, XY) as
  row-major float32; a "HEAD" section with per-layer shape headers; a
  "BETA" section with the schedule state. Round-trips bit-exactly.
* Depth raster: 16-byte header (magic "DPT1", uint32 width, height,
  reserved) followed by row-major float32.
* Images: 8-bit PNG, values treated as linear.
* Cameras: whitespace-separated blocks of 22 numbers - 16 row-major
  world-to-camera extrinsic values, then fx fy cx cy width height.
* Meshes: Wavefront OBJ using the 6-float vertex-color extension
  (x y z r g b); shading colors go to a "_shading.obj" sidecar.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .autodiff import Var
from .bundle import RenderBundle
from .cameras import Camera
from .density import BetaSchedule
from .extract import Mesh
from .field import TensorField
from .heads import MLP, HeadSet

__all__ = [
    "save_checkpoint", "load_checkpoint",
    "save_png", "load_png", "save_depth", "load_depth",
    "save_cameras", "load_cameras",
    "save_bundle", "load_bundle",
    "save_obj", "load_obj", "export_mesh",
    "save_scene_yaml", "load_scene_yaml",
    "write_csv", "save_json",
]

_MAGIC_FIELD = b"TSDF1"
_MAGIC_HEADS = b"HEAD"
_MAGIC_BETA = b"BETA"
_BETA_MODES = ("fixed", "linear", "adaptive")


# ------------------------------------------------------------- checkpoint

def save_checkpoint(path, field: TensorField, heads: HeadSet | None = None,
                    sched: BetaSchedule | None = None) -> None:
    path = Path(path)
    parts = [_MAGIC_FIELD,
             struct.pack("<II", field.resolution, field.channels)]
    for v in field.vectors:
        parts.append(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    for m in field.matrices:
        parts.append(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    if heads is not None:
        parts.append(_MAGIC_HEADS)
        mlps = heads.mlps()
        parts.append(struct.pack("<I", len(mlps)))
        for mlp in mlps:
            parts.append(struct.pack("<I", len(mlp.weights)))
            for w, b in zip(mlp.weights, mlp.biases):
                parts.append(struct.pack("<II", *w.data.shape))
                parts.append(np.ascontiguousarray(w.data, dtype="<f4").tobytes())
                parts.append(struct.pack("<I", b.data.size))
                parts.append(np.ascontiguousarray(b.data, dtype="<f4").tobytes())
    if sched is not None:
        parts.append(_MAGIC_BETA)
        parts.append(struct.pack("<I", _BETA_MODES.index(sched.mode)))
        log_beta = float(np.log(sched.beta)) if sched.mode == "adaptive" else 0.0
        parts.append(struct.pack("<ddd", sched.beta0, sched.beta1, log_beta))
    path.write_bytes(b"".join(parts))


def load_checkpoint(path, dtype=np.float32):
    """Returns (field, heads | None, sched | None)."""
    buf = Path(path).read_bytes()
    if buf[:5] != _MAGIC_FIELD:
        raise ValueError("not a TSDF1 checkpoint")
    off = 5
    n, r = struct.unpack_from("<II", buf, off)
    off += 8

    def read_array(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
        off += 4 * count
        return Var(arr.reshape(shape).astype(dtype), requires=True)

    vectors = [read_array((n, r)) for _ in range(3)]
    matrices = [read_array((n, n, r)) for _ in range(3)]
    field = TensorField(resolution=n, channels=r, vectors=vectors,
                        matrices=matrices)

    heads = None
    if buf[off:off + 4] == _MAGIC_HEADS:
        off += 4
        (n_mlps,) = struct.unpack_from("<I", buf, off)
        off += 4
        mlps = []
        for mi in range(n_mlps):
            (n_layers,) = struct.unpack_from("<I", buf, off)
            off += 4
            weights, biases = [], []
            for _ in range(n_layers):
                rows, cols = struct.unpack_from("<II", buf, off)
                off += 8
                weights.append(read_array((rows, cols)))
                (blen,) = struct.unpack_from("<I", buf, off)
                off += 4
                biases.append(read_array((blen,)))
            mlps.append(MLP(weights, biases,
                            "softplus" if mi == 0 else "relu"))
        heads = HeadSet(sdf=mlps[0], color=mlps[1], deform=mlps[2],
                        weight=mlps[3], feature_dim=3 * r)

    sched = None
    if buf[off:off + 4] == _MAGIC_BETA:
        off += 4
        (mode_code,) = struct.unpack_from("<I", buf, off)
        off += 4
        beta0, beta1, log_beta = struct.unpack_from("<ddd", buf, off)
        off += 24
        sched = BetaSchedule(mode=_BETA_MODES[mode_code], beta0=beta0,
                             beta1=beta1)
        if sched.mode == "adaptive":
            sched.log_beta.data = np.asarray(log_beta, dtype=np.float64)
    return field, heads, sched


# ----------------------------------------------------------------- images

def save_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(str(path))


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(str(path)), dtype=np.float64) / 255.0


def save_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    header = b"DPT1" + struct.pack("<III", w, h, 0)
    Path(path).write_bytes(header
                           + np.ascontiguousarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != b"DPT1":
        raise ValueError("not a DPT1 depth raster")
    w, h, _ = struct.unpack_from("<III", buf, 4)
    return np.frombuffer(buf, dtype="<f4", count=w * h,
                         offset=16).reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------- cameras

def save_cameras(path, cameras: list[Camera]) -> None:
    lines = []
    for cam in cameras:
        for row in cam.extrinsic:
            lines.append(" ".join(f"{v:.17g}" for v in row))
        lines.append(f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} "
                     f"{cam.cy:.17g} {cam.width} {cam.height}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def load_cameras(path) -> list[Camera]:
    tokens = Path(path).read_text().split()
    if len(tokens) % 22 != 0:
        raise ValueError("camera file must hold blocks of 22 numbers")
    cams = []
    for i in range(0, len(tokens), 22):
        vals = [float(t) for t in tokens[i:i + 22]]
        cams.append(Camera(np.array(vals[:16]).reshape(4, 4),
                           fx=vals[16], fy=vals[17], cx=vals[18],
                           cy=vals[19], width=int(vals[20]),
                           height=int(vals[21])))
    return cams


# ---------------------------------------------------------------- bundles

def save_bundle(dirpath, name: str, bundle: RenderBundle) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    save_png(d / f"{name}_rgb.png", bundle.rgb)
    save_png(d / f"{name}_albedo.png", bundle.albedo)
    save_png(d / f"{name}_mask.png", bundle.mask)
    save_depth(d / f"{name}_depth.dpt", bundle.depth)


def load_bundle(dirpath, name: str) -> RenderBundle:
    d = Path(dirpath)
    return RenderBundle(rgb=load_png(d / f"{name}_rgb.png"),
                        albedo=load_png(d / f"{name}_albedo.png"),
                        mask=load_png(d / f"{name}_mask.png"),
                        depth=load_depth(d / f"{name}_depth.dpt"))


# ----------------------------------------------------------------- meshes

def save_obj(path, vertices: np.ndarray, triangles: np.ndarray,
             colors: np.ndarray | None = None) -> None:
    lines = []
    if colors is not None:
        for v, c in zip(vertices, colors):
            lines.append(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g} "
                         f"{c[0]:.6g} {c[1]:.6g} {c[2]:.6g}")
    else:
        for v in vertices:
            lines.append(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}")
    for t in triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path):
    """Returns (vertices, triangles, colors | None)."""
    verts, faces, colors = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                colors.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    v = np.array(verts) if verts else np.zeros((0, 3))
    f = np.array(faces, dtype=np.int64) if faces else np.zeros((0, 3),
                                                               dtype=np.int64)
    c = np.array(colors) if len(colors) == len(verts) and verts else None
    return v, f, c


def export_mesh(path, mesh: Mesh) -> None:
    """OBJ with albedo vertex colors plus a shading-color sidecar."""
    path = Path(path)
    save_obj(path, mesh.vertices, mesh.triangles, mesh.vertex_albedo)
    if mesh.vertex_shading is not None:
        sidecar = path.with_name(path.stem + "_shading.obj")
        save_obj(sidecar, mesh.vertices, mesh.triangles, mesh.vertex_shading)


# ------------------------------------------------------------ small files

def save_scene_yaml(path, scene_dict: dict) -> None:
    Path(path).write_text(yaml.safe_dump(scene_dict, sort_keys=True))


def load_scene_yaml(path) -> dict:
    return yaml.safe_load(Path(path).read_text())


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.10g}" if isinstance(v, float) else str(v)
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
